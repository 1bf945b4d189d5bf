#include "s2m/embedding_net.hpp"

#include "json.hpp"

#include "s2m/model_io.hpp"

namespace s2m {

using nlohmann::json;

// {"format": "s2m-net", "input_dim": .., "layers": [{"in": .., "out": ..,
//  "activation": "relu"|"identity", "weights": [row-major out*in], "bias": [..]}]}
std::string net_to_json(const EmbeddingNet<double>& net) {
  json j;
  j["format"] = "s2m-net";
  j["input_dim"] = net.input_dim();
  j["layers"] = json::array();
  for (const auto& L : net.layers) {
    json l;
    l["in"] = L.in_dim();
    l["out"] = L.out_dim();
    l["activation"] = to_string(L.activation);
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(L.weight.size()));
    for (Index r = 0; r < L.out_dim(); ++r)
      for (Index c = 0; c < L.in_dim(); ++c) w.push_back(L.weight(r, c));
    l["weights"] = std::move(w);
    l["bias"] = std::vector<double>(L.bias.data(), L.bias.data() + L.bias.size());
    j["layers"].push_back(std::move(l));
  }
  return j.dump();
}

EmbeddingNet<double> net_from_json(const std::string& text) {
  EmbeddingNet<double> net;
  try {
    const json j = json::parse(text);
    for (const auto& l : j.at("layers")) {
      AffineLayer<double> L;
      const Index in = l.at("in").get<Index>(), out = l.at("out").get<Index>();
      const auto act = l.at("activation").get<std::string>();
      if (act == "relu")
        L.activation = Activation::relu;
      else if (act == "identity")
        L.activation = Activation::identity;
      else
        throw DataError("net file: unknown activation '" + act + "'");
      const auto w = l.at("weights").get<std::vector<double>>();
      const auto b = l.at("bias").get<std::vector<double>>();
      if (in < 1 || out < 1 || static_cast<Index>(w.size()) != in * out || static_cast<Index>(b.size()) != out)
        throw DataError("net file: layer array sizes do not match its dimensions");
      L.weight.resize(out, in);
      for (Index r = 0; r < out; ++r)
        for (Index c = 0; c < in; ++c) L.weight(r, c) = w[static_cast<std::size_t>(r * in + c)];
      L.bias = Eigen::Map<const Vector<double>>(b.data(), out);
      net.layers.push_back(std::move(L));
    }
    if (j.contains("input_dim") && j["input_dim"].get<Index>() != net.input_dim())
      throw DataError("net file: input_dim does not match first layer");
  } catch (const json::exception& e) {
    throw DataError(std::string("net file: ") + e.what());
  }
  net.validate();
  return net;
}

void save_net(const EmbeddingNet<double>& net, const std::string& path) { write_text_file(path, net_to_json(net)); }

EmbeddingNet<double> load_net(const std::string& path) { return net_from_json(read_text_file(path)); }

}  // namespace s2m
