#pragma once

#include <filesystem>
#include <string>

#include "specdraft/base_lm.hpp"
#include "specdraft/specformer.hpp"

namespace specdraft {

// A checkpoint is a directory holding manifest.json, which records the kind
// ("base" or "draft"), the model config and one {name, precision, shape,
// file} record per tensor, plus one raw little-endian row-major file per
// tensor. Loading checks every tensor against the layout the config implies
// and converts precision if the file was written in the other one.

template <typename T>
void save_base(const BaseLM<T>& model, const std::filesystem::path& dir);
template <typename T>
BaseLM<T> load_base(const std::filesystem::path& dir);

template <typename T>
void save_draft(const SpecFormer<T>& model, const std::filesystem::path& dir);
template <typename T>
SpecFormer<T> load_draft(const std::filesystem::path& dir);

/// "base" or "draft", read from the manifest.
std::string checkpoint_kind(const std::filesystem::path& dir);

}  // namespace specdraft
