#include "twostep/runtime/protocol.hpp"

#include <cmath>

namespace twostep::runtime {

using nlohmann::json;

std::string to_string(EvaluatorKind kind) {
  switch (kind) {
    case EvaluatorKind::mlp: return "mlp";
    case EvaluatorKind::synthetic: return "synthetic";
    case EvaluatorKind::external: return "external";
  }
  return "unknown";
}

EvaluatorKind evaluator_from_string(const std::string& name) {
  if (name == "mlp") return EvaluatorKind::mlp;
  if (name == "synthetic") return EvaluatorKind::synthetic;
  if (name == "external") return EvaluatorKind::external;
  throw ProtocolError("unknown evaluator kind '" + name + "'");
}

void to_json(json& j, const TrialAssignment& a) {
  j = json{{"project_id", a.project_id},
           {"trial_id", a.trial_id},
           {"step", a.step},
           {"hidden_widths", a.config.hidden_widths()},
           {"config_id", a.config.config_id()},
           {"dataset", a.dataset},
           {"p_subset", a.p_subset},
           {"train_fraction", a.train_fraction},
           {"subset_seed", a.subset_seed},
           {"split_seed", a.split_seed},
           {"init_seed", a.init_seed},
           {"train_seed", a.train_seed},
           {"budget", a.budget},
           {"evaluator", to_string(a.evaluator)},
           {"n_subset", a.n_subset},
           {"n_train", a.n_train},
           {"checkpoint", a.checkpoint}};
  j["source_rank"] = a.source_rank ? json(*a.source_rank) : json(nullptr);
}

void from_json(const json& j, TrialAssignment& a) {
  a.project_id = j.at("project_id").get<std::string>();
  a.trial_id = j.at("trial_id").get<std::int64_t>();
  a.step = j.at("step").get<int>();
  a.config = space::TrialConfig(j.at("hidden_widths").get<std::vector<int>>());
  if (j.contains("config_id") && j.at("config_id").get<std::uint64_t>() != a.config.config_id()) {
    throw ProtocolError("config_id does not match hidden_widths for trial " +
                        std::to_string(a.trial_id));
  }
  a.dataset = j.at("dataset").get<data::DatasetRef>();
  a.p_subset = j.at("p_subset").get<double>();
  a.train_fraction = j.at("train_fraction").get<double>();
  a.subset_seed = j.at("subset_seed").get<std::uint64_t>();
  a.split_seed = j.at("split_seed").get<std::uint64_t>();
  a.init_seed = j.at("init_seed").get<std::uint64_t>();
  a.train_seed = j.at("train_seed").get<std::uint64_t>();
  a.budget = j.at("budget").get<trainer::TrainBudget>();
  a.evaluator = evaluator_from_string(j.at("evaluator").get<std::string>());
  a.n_subset = j.value("n_subset", std::int64_t{0});
  a.n_train = j.value("n_train", std::int64_t{0});
  a.source_rank.reset();
  if (auto it = j.find("source_rank"); it != j.end() && !it->is_null()) {
    a.source_rank = it->get<std::int64_t>();
  }
  a.checkpoint = j.value("checkpoint", std::string());
}

namespace {

std::string line(json j, const char* type) {
  j["v"] = kProtocolVersion;
  j["type"] = type;
  return j.dump();
}

template <typename F>
auto guarded(const char* what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed ") + what + " message: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ProtocolError(std::string("malformed ") + what + " message: " + e.what());
  }
}

void require_type(const json& j, const char* type) {
  if (j.at("type") != type) throw ProtocolError(std::string("expected a ") + type + " message");
}

}  // namespace

std::string encode(const msg::Register& m) {
  std::vector<std::string> kinds;
  for (auto k : m.evaluators) kinds.push_back(to_string(k));
  json j{{"worker_id", m.worker_id}, {"evaluators", kinds}};
  j["v"] = m.version;
  j["type"] = "register";
  return j.dump();
}

std::string encode(const msg::Heartbeat& m) {
  return line(json{{"worker_id", m.worker_id}}, "heartbeat");
}

std::string encode(const msg::Result& m) {
  const auto& r = m.result;
  return line(json{{"trial_id", m.trial_id},
                   {"min_val_mse", r.min_val_mse},
                   {"best_epoch", r.best_epoch},
                   {"epochs_run", r.epochs_run},
                   {"param_count", r.param_count},
                   {"wall_seconds", m.wall_seconds},
                   {"cost_units", r.cost_units},
                   {"stopped_early", r.stopped_early},
                   {"n_train", r.n_train},
                   {"val_mse_history", r.val_mse_history}},
              "result");
}

std::string encode(const msg::Error& m) {
  return line(json{{"trial_id", m.trial_id}, {"reason", m.reason}, {"retryable", m.retryable}},
              "error");
}

std::string encode(const msg::Assign& m) { return line(json(m.assignment), "assign"); }

std::string encode(const msg::Drain&) { return line(json::object(), "drain"); }

std::string encode(const msg::Reject& m) {
  return line(json{{"code", m.code}, {"reason", m.reason}}, "reject");
}

json parse_message(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ProtocolError("message is not a JSON object");
  const auto v = j.find("v");
  const auto type = j.find("type");
  if (v == j.end() || !v->is_number_integer()) throw ProtocolError("message lacks integer \"v\"");
  if (type == j.end() || !type->is_string()) throw ProtocolError("message lacks string \"type\"");
  if (*v != kProtocolVersion && *type != "register") {
    throw ProtocolError("protocol version " + v->dump() + " is not supported");
  }
  return j;
}

msg::Register decode_register(const json& j) {
  return guarded("register", [&] {
    require_type(j, "register");
    msg::Register m;
    m.version = j.at("v").get<int>();
    m.worker_id = j.at("worker_id").get<std::string>();
    if (m.worker_id.empty()) throw ProtocolError("register needs a non-empty worker_id");
    for (const auto& k : j.at("evaluators")) m.evaluators.push_back(evaluator_from_string(k.get<std::string>()));
    return m;
  });
}

msg::Heartbeat decode_heartbeat(const json& j) {
  return guarded("heartbeat", [&] {
    require_type(j, "heartbeat");
    return msg::Heartbeat{j.at("worker_id").get<std::string>()};
  });
}

trainer::TrialResult decode_result_file(const json& j) {
  return guarded("result", [&] {
    trainer::TrialResult r;
    r.min_val_mse = j.at("min_val_mse").get<double>();
    if (!std::isfinite(r.min_val_mse) || r.min_val_mse < 0.0) {
      throw ProtocolError("min_val_mse must be finite and non-negative");
    }
    r.epochs_run = j.at("epochs_run").get<int>();
    r.param_count = j.at("param_count").get<std::int64_t>();
    r.best_epoch = j.value("best_epoch", r.epochs_run);
    r.cost_units = j.value("cost_units", 0.0);
    r.stopped_early = j.value("stopped_early", false);
    r.n_train = j.value("n_train", std::int64_t{0});
    r.val_mse_history = j.value("val_mse_history", std::vector<double>{});
    if (r.epochs_run < 0 || r.best_epoch < 0 || r.best_epoch > r.epochs_run) {
      throw ProtocolError("epoch counts are inconsistent");
    }
    return r;
  });
}

msg::Result decode_result(const json& j) {
  return guarded("result", [&] {
    require_type(j, "result");
    msg::Result m;
    m.trial_id = j.at("trial_id").get<std::int64_t>();
    m.result = decode_result_file(j);
    m.wall_seconds = j.value("wall_seconds", 0.0);
    return m;
  });
}

msg::Error decode_error(const json& j) {
  return guarded("error", [&] {
    require_type(j, "error");
    msg::Error m;
    m.trial_id = j.at("trial_id").get<std::int64_t>();
    m.reason = j.at("reason").get<std::string>();
    m.retryable = j.value("retryable", true);
    return m;
  });
}

msg::Assign decode_assign(const json& j) {
  return guarded("assign", [&] {
    require_type(j, "assign");
    return msg::Assign{j.get<TrialAssignment>()};
  });
}

msg::Reject decode_reject(const json& j) {
  return guarded("reject", [&] {
    require_type(j, "reject");
    return msg::Reject{j.at("code").get<std::string>(), j.value("reason", std::string())};
  });
}

}  // namespace twostep::runtime
