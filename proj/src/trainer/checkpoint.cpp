#include <fstream>
#include <stdexcept>

#include "twostep/trainer.hpp"

namespace twostep::trainer {

void save_checkpoint(const std::filesystem::path& path, const MlpModel& model,
                     const data::Standardizer& standardizer) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : model.layers()) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(layer.weights.size()));
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) w.push_back(layer.weights(r, c));
    }
    layers.push_back({{"rows", layer.weights.rows()},
                      {"cols", layer.weights.cols()},
                      {"weights", std::move(w)},
                      {"bias", std::vector<double>(layer.bias.data(),
                                                   layer.bias.data() + layer.bias.size())}});
  }
  const nlohmann::json doc{{"format", "twostep-mlp"},
                           {"version", 1},
                           {"n_inputs", model.n_inputs()},
                           {"n_outputs", model.n_outputs()},
                           {"hidden_widths", model.hidden_widths()},
                           {"input_mean", standardizer.mean()},
                           {"input_std", standardizer.stddev()},
                           {"layers", std::move(layers)}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp);
    out << doc.dump() << '\n';
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
    if (doc.at("format") != "twostep-mlp" || doc.at("version") != 1) {
      throw std::runtime_error("unsupported checkpoint format in " + path.string());
    }
    std::vector<DenseLayer> layers;
    for (const auto& l : doc.at("layers")) {
      const auto rows = l.at("rows").get<Eigen::Index>();
      const auto cols = l.at("cols").get<Eigen::Index>();
      const auto w = l.at("weights").get<std::vector<double>>();
      const auto b = l.at("bias").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(w.size()) != rows * cols ||
          static_cast<Eigen::Index>(b.size()) != rows) {
        throw std::runtime_error("checkpoint layer shape mismatch in " + path.string());
      }
      DenseLayer layer;
      layer.weights.resize(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) layer.weights(r, c) = w[static_cast<std::size_t>(r * cols + c)];
      }
      layer.bias = Eigen::Map<const Eigen::VectorXd>(b.data(), rows);
      layers.push_back(std::move(layer));
    }
    return Checkpoint{MlpModel(std::move(layers)),
                      data::Standardizer(doc.at("input_mean").get<std::vector<double>>(),
                                         doc.at("input_std").get<std::vector<double>>())};
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace twostep::trainer
