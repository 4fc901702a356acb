// Model file I/O. Layout: magic "GSEG", u32 format version, u64 manifest
// length, JSON manifest (architecture tag, label frequencies, per-model layer
// specs), then per-bank raw little-endian float32 weight and bias blobs in
// manifest order. Round-trips are byte-exact.
#ifndef GSEG_MODEL_IO_HPP_
#define GSEG_MODEL_IO_HPP_

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gseg/graph.hpp"

namespace gseg {

constexpr std::uint32_t kModelFormatVersion = 1;

struct ModelFile {
  std::string arch = "custom";
  std::vector<double> label_frequencies;
  std::vector<ModelGraph> graphs;
  std::vector<ParameterStore> stores;  // one per graph
};

namespace detail {

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::ConvMaxoutPool: return "conv_maxout_pool";
    case LayerKind::ConcatChannels: return "concat";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::SoftmaxConvOutput: return "softmax_output";
  }
  return "?";
}

inline LayerKind kind_from_name(const std::string& s) {
  if (s == "conv_maxout_pool") return LayerKind::ConvMaxoutPool;
  if (s == "concat") return LayerKind::ConcatChannels;
  if (s == "dropout") return LayerKind::Dropout;
  if (s == "softmax_output") return LayerKind::SoftmaxConvOutput;
  raise<DataError>("model manifest: unknown layer kind '", s, "'");
}

inline nlohmann::json graph_to_json(const ModelGraph& g) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerSpec& l : g.layers) {
    nlohmann::json j{{"kind", kind_name(l.kind)}, {"inputs", l.input_refs}};
    switch (l.kind) {
      case LayerKind::ConvMaxoutPool:
        j["name"] = l.name;
        j["kernel"] = l.kernel;
        j["out_maps"] = l.out_maps;
        j["maxout_k"] = l.maxout_k;
        j["pool_p"] = l.pool_p;
        j["pool_stride"] = l.pool_stride;
        break;
      case LayerKind::SoftmaxConvOutput:
        j["name"] = l.name;
        j["kernel"] = l.kernel;
        j["out_maps"] = l.out_maps;
        break;
      case LayerKind::Dropout:
        j["prob"] = l.dropout_prob;
        break;
      case LayerKind::ConcatChannels:
        break;
    }
    layers.push_back(std::move(j));
  }
  return nlohmann::json{{"input_channels", g.input_channels},
                        {"aux_channels", g.aux_channels},
                        {"label_count", g.label_count},
                        {"layers", std::move(layers)}};
}

inline ModelGraph graph_from_json(const nlohmann::json& j) {
  ModelGraph g;
  g.input_channels = j.at("input_channels").get<int>();
  g.aux_channels = j.at("aux_channels").get<int>();
  g.label_count = j.at("label_count").get<int>();
  for (const auto& lj : j.at("layers")) {
    LayerSpec l;
    l.kind = kind_from_name(lj.at("kind").get<std::string>());
    l.input_refs = lj.at("inputs").get<std::vector<int>>();
    switch (l.kind) {
      case LayerKind::ConvMaxoutPool:
        l.name = lj.at("name").get<std::string>();
        l.kernel = lj.at("kernel").get<int>();
        l.out_maps = lj.at("out_maps").get<int>();
        l.maxout_k = lj.at("maxout_k").get<int>();
        l.pool_p = lj.at("pool_p").get<int>();
        l.pool_stride = lj.at("pool_stride").get<int>();
        break;
      case LayerKind::SoftmaxConvOutput:
        l.name = lj.at("name").get<std::string>();
        l.kernel = lj.at("kernel").get<int>();
        l.out_maps = lj.at("out_maps").get<int>();
        break;
      case LayerKind::Dropout:
        l.dropout_prob = lj.at("prob").get<double>();
        break;
      case LayerKind::ConcatChannels:
        break;
    }
    g.layers.push_back(std::move(l));
  }
  return g;
}

inline void write_f32_le(std::ostream& os, const std::vector<float>& v) {
  static_assert(sizeof(float) == 4);
  // on-disk format is little-endian; this build targets LE hosts
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * 4));
}

inline void read_f32_le(std::istream& is, std::vector<float>& v, const char* what) {
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * 4));
  if (static_cast<std::size_t>(is.gcount()) != v.size() * 4)
    raise<IoError>("truncated model file while reading ", what);
}

}  // namespace detail

inline void save_model(const ModelFile& m, const std::string& path) {
  if (m.graphs.size() != m.stores.size() || m.graphs.empty())
    raise<DataError>("save_model: ", m.graphs.size(), " graphs vs ", m.stores.size(), " stores");

  nlohmann::json manifest{{"format", "gseg-model"},
                          {"arch", m.arch},
                          {"label_frequencies", m.label_frequencies}};
  nlohmann::json models = nlohmann::json::array();
  for (std::size_t i = 0; i < m.graphs.size(); ++i) {
    nlohmann::json gj = detail::graph_to_json(m.graphs[i]);
    gj["store_version"] = m.stores[i].version;
    models.push_back(std::move(gj));
  }
  manifest["models"] = std::move(models);
  const std::string blob = manifest.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) raise<IoError>("cannot open '", path, "' for writing");
  os.write("GSEG", 4);
  const std::uint32_t ver = kModelFormatVersion;
  os.write(reinterpret_cast<const char*>(&ver), 4);
  const std::uint64_t len = blob.size();
  os.write(reinterpret_cast<const char*>(&len), 8);
  os.write(blob.data(), static_cast<std::streamsize>(blob.size()));

  for (std::size_t i = 0; i < m.graphs.size(); ++i) {
    const ModelGraph& g = m.graphs[i];
    const ParameterStore& store = m.stores[i];
    const std::vector<int> ch = layer_channels(g);
    for (std::size_t li = 0; li < g.layers.size(); ++li) {
      const LayerSpec& l = g.layers[li];
      if (!l.parametric()) continue;
      const KernelBank& bank = store.find(l.name);
      const int want_in = layer_in_channels(g, ch, static_cast<int>(li));
      if (bank.out_maps != l.bank_maps() || bank.in_channels != want_in ||
          bank.kernel != l.kernel)
        raise<DataError>("save_model: bank '", l.name, "' shape ", bank.out_maps, "x",
                         bank.in_channels, "x", bank.kernel, " disagrees with layer spec");
      detail::write_f32_le(os, bank.weights);
      detail::write_f32_le(os, bank.bias);
    }
  }
  if (!os) raise<IoError>("write failed for '", path, "'");
}

inline void save_model(const ModelGraph& g, const ParameterStore& store,
                       const std::string& path, const std::string& arch = "custom",
                       std::vector<double> label_freqs = {}) {
  ModelFile m;
  m.arch = arch;
  m.label_frequencies = std::move(label_freqs);
  m.graphs = {g};
  m.stores = {store};
  save_model(m, path);
}

inline ModelFile load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) raise<IoError>("cannot open model file '", path, "'");
  char magic[4] = {};
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, "GSEG", 4) != 0)
    raise<IoError>("'", path, "' is not a model file (bad magic)");
  std::uint32_t ver = 0;
  is.read(reinterpret_cast<char*>(&ver), 4);
  if (is.gcount() != 4) raise<IoError>("truncated model file while reading version");
  if (ver != kModelFormatVersion)
    raise<IoError>("unsupported model format version ", ver, " (expected ",
                   kModelFormatVersion, ")");
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), 8);
  if (is.gcount() != 8) raise<IoError>("truncated model file while reading manifest length");
  std::string blob(len, '\0');
  is.read(blob.data(), static_cast<std::streamsize>(len));
  if (static_cast<std::uint64_t>(is.gcount()) != len)
    raise<IoError>("truncated model file while reading manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(blob);
  } catch (const nlohmann::json::exception& e) {
    raise<DataError>("model manifest is not valid JSON: ", e.what());
  }
  ModelFile m;
  m.arch = manifest.at("arch").get<std::string>();
  m.label_frequencies = manifest.at("label_frequencies").get<std::vector<double>>();
  for (const auto& gj : manifest.at("models")) {
    ModelGraph g = detail::graph_from_json(gj);
    const std::vector<int> ch = layer_channels(g);  // validates structure
    receptive_field(g);
    ParameterStore store;
    store.version = gj.value("store_version", 1u);
    for (std::size_t li = 0; li < g.layers.size(); ++li) {
      const LayerSpec& l = g.layers[li];
      if (!l.parametric()) continue;
      KernelBank bank(l.bank_maps(), layer_in_channels(g, ch, static_cast<int>(li)), l.kernel);
      detail::read_f32_le(is, bank.weights, l.name.c_str());
      detail::read_f32_le(is, bank.bias, l.name.c_str());
      store.banks.emplace_back(l.name, std::move(bank));
    }
    m.graphs.push_back(std::move(g));
    m.stores.push_back(std::move(store));
  }
  // anything left over means the manifest disagrees with the payload
  char extra;
  is.read(&extra, 1);
  if (is.gcount() != 0)
    raise<DataError>("model file has trailing bytes beyond the manifest's shapes");
  return m;
}

}  // namespace gseg

#endif  // GSEG_MODEL_IO_HPP_
