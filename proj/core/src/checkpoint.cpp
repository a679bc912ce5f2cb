#include "specdraft/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <vector>

namespace specdraft {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifest = "manifest.json";

template <typename U>
void to_little_endian(std::vector<U>& v) {
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& x : v) {
      unsigned char b[sizeof(U)];
      std::memcpy(b, &x, sizeof(U));
      std::reverse(b, b + sizeof(U));
      std::memcpy(&x, b, sizeof(U));
    }
  }
}

std::string file_name_for(const std::string& tensor) {
  std::string out = tensor;
  std::replace(out.begin(), out.end(), '/', '_');
  return out + ".bin";
}

template <typename T>
json write_tensor(const fs::path& dir, const std::string& name, const Tensor<T>& t) {
  const std::string file = file_name_for(name);
  std::vector<T> data(t.storage());
  to_little_endian(data);
  std::ofstream f(dir / file, std::ios::binary);
  if (!f) throw IoError("cannot write " + (dir / file).string());
  f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)));
  if (!f) throw IoError("failed while writing " + (dir / file).string());
  return json{{"name", name}, {"precision", precision_name(precision_of<T>())}, {"shape", t.shape()}, {"file", file}};
}

template <typename U>
std::vector<U> read_raw(const fs::path& path, std::size_t count) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot read " + path.string());
  const auto bytes = static_cast<std::size_t>(f.tellg());
  if (bytes != count * sizeof(U)) {
    throw IoError(path.string() + " holds " + std::to_string(bytes) + " bytes, expected " +
                  std::to_string(count * sizeof(U)));
  }
  f.seekg(0);
  std::vector<U> data(count);
  f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  to_little_endian(data);
  return data;
}

template <typename T>
Tensor<T> read_tensor(const fs::path& dir, const json& rec, const Shape& expected) {
  const std::string name = rec.at("name").get<std::string>();
  const Shape shape = rec.at("shape").get<Shape>();
  if (shape != expected) {
    throw DimensionError("checkpoint tensor " + name + " has shape " + shape_str(shape) + ", expected " +
                         shape_str(expected));
  }
  const fs::path path = dir / rec.at("file").get<std::string>();
  const std::size_t n = shape_numel(shape);
  std::vector<T> data;
  switch (parse_precision(rec.at("precision").get<std::string>())) {
    case Precision::kSingle: {
      auto raw = read_raw<float>(path, n);
      data.assign(raw.begin(), raw.end());
      break;
    }
    case Precision::kDouble: {
      auto raw = read_raw<double>(path, n);
      data.assign(raw.begin(), raw.end());
      break;
    }
  }
  Tensor<T> t(shape, std::move(data));
  t.require_finite(name.c_str());
  return t;
}

json read_manifest(const fs::path& dir) {
  std::ifstream f(dir / kManifest);
  if (!f) throw IoError("no " + std::string(kManifest) + " in " + dir.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
  }
}

void write_manifest(const fs::path& dir, const json& manifest) {
  std::ofstream f(dir / kManifest);
  if (!f) throw IoError("cannot write manifest in " + dir.string());
  f << manifest.dump(2) << '\n';
}

// Fills params (in layout order) from the manifest's tensor records.
template <typename T, typename Params>
void load_tensors(const fs::path& dir, const json& manifest, const std::vector<std::pair<std::string, Shape>>& layout,
                  Params params) {
  const json& records = manifest.at("tensors");
  if (records.size() != layout.size()) {
    throw DimensionError("checkpoint lists " + std::to_string(records.size()) + " tensors, expected " +
                         std::to_string(layout.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    auto it = std::find_if(records.begin(), records.end(),
                           [&](const json& r) { return r.at("name").get<std::string>() == layout[i].first; });
    if (it == records.end()) throw DimensionError("checkpoint is missing tensor " + layout[i].first);
    params[i]->value() = read_tensor<T>(dir, *it, layout[i].second);
  }
}

json base_config_json(const BaseLMConfig& c) {
  return {{"layers", c.layers}, {"hidden", c.hidden},     {"heads", c.heads},         {"ffn", c.ffn},
          {"vocab", c.vocab},   {"max_seq", c.max_seq},   {"rope_base", c.rope_base}, {"norm_eps", c.norm_eps}};
}

BaseLMConfig base_config_from(const json& j) {
  BaseLMConfig c;
  c.layers = j.at("layers");
  c.hidden = j.at("hidden");
  c.heads = j.at("heads");
  c.ffn = j.at("ffn");
  c.vocab = j.at("vocab");
  c.max_seq = j.at("max_seq");
  c.rope_base = j.at("rope_base");
  c.norm_eps = j.at("norm_eps");
  return c;
}

json draft_config_json(const SpecFormerConfig& c) {
  return {{"hidden", c.hidden}, {"l_d", c.l_d},           {"heads", c.heads},          {"ffn", c.ffn},
          {"blocks", c.blocks}, {"norm_eps", c.norm_eps}, {"rope_base", c.rope_base}};
}

SpecFormerConfig draft_config_from(const json& j) {
  SpecFormerConfig c;
  c.hidden = j.at("hidden");
  c.l_d = j.at("l_d");
  c.heads = j.at("heads");
  c.ffn = j.at("ffn");
  c.blocks = j.at("blocks");
  c.norm_eps = j.at("norm_eps");
  c.rope_base = j.at("rope_base");
  return c;
}

void expect_kind(const json& manifest, const std::string& kind, const fs::path& dir) {
  const std::string got = manifest.at("kind").get<std::string>();
  if (got != kind) throw IoError(dir.string() + " holds a " + got + " checkpoint, expected " + kind);
}

template <typename Model>
void save_model(const Model& model, const fs::path& dir, const std::string& kind, json config) {
  fs::create_directories(dir);
  json tensors = json::array();
  for (const auto* p : model.parameters()) tensors.push_back(write_tensor(dir, p->name(), p->value()));
  write_manifest(dir, json{{"kind", kind}, {"config", std::move(config)}, {"tensors", std::move(tensors)}});
}

}  // namespace

template <typename T>
void save_base(const BaseLM<T>& model, const fs::path& dir) {
  save_model(model, dir, "base", base_config_json(model.config()));
}

template <typename T>
BaseLM<T> load_base(const fs::path& dir) {
  const json manifest = read_manifest(dir);
  try {
    expect_kind(manifest, "base", dir);
    auto model = BaseLM<T>::zeros(base_config_from(manifest.at("config")));
    load_tensors<T>(dir, manifest, BaseLM<T>::tensor_layout(model.config()), model.parameters());
    return model;
  } catch (const json::exception& e) {
    throw IoError("malformed base manifest in " + dir.string() + ": " + e.what());
  }
}

template <typename T>
void save_draft(const SpecFormer<T>& model, const fs::path& dir) {
  save_model(model, dir, "draft", draft_config_json(model.config()));
}

template <typename T>
SpecFormer<T> load_draft(const fs::path& dir) {
  const json manifest = read_manifest(dir);
  try {
    expect_kind(manifest, "draft", dir);
    auto model = SpecFormer<T>::zeros(draft_config_from(manifest.at("config")));
    load_tensors<T>(dir, manifest, SpecFormer<T>::tensor_layout(model.config()), model.parameters());
    return model;
  } catch (const json::exception& e) {
    throw IoError("malformed draft manifest in " + dir.string() + ": " + e.what());
  }
}

std::string checkpoint_kind(const fs::path& dir) {
  const json manifest = read_manifest(dir);
  try {
    return manifest.at("kind").get<std::string>();
  } catch (const json::exception& e) {
    throw IoError("manifest in " + dir.string() + " has no kind");
  }
}

template void save_base(const BaseLM<float>&, const fs::path&);
template void save_base(const BaseLM<double>&, const fs::path&);
template BaseLM<float> load_base(const fs::path&);
template BaseLM<double> load_base(const fs::path&);
template void save_draft(const SpecFormer<float>&, const fs::path&);
template void save_draft(const SpecFormer<double>&, const fs::path&);
template SpecFormer<float> load_draft(const fs::path&);
template SpecFormer<double> load_draft(const fs::path&);

}  // namespace specdraft
