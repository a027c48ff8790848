#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "twostep/data.hpp"
#include "twostep/space.hpp"
#include "twostep/trainer.hpp"

namespace twostep::runtime {

inline constexpr int kProtocolVersion = 1;
inline constexpr int kLedgerSchema = 1;

/// Thrown for malformed or out-of-sequence protocol messages.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class EvaluatorKind { mlp, synthetic, external };

std::string to_string(EvaluatorKind kind);
/// Throws ProtocolError for an unknown name.
EvaluatorKind evaluator_from_string(const std::string& name);

/// Everything a worker needs to run one trial. All randomness comes from the
/// seeds carried here, so the outcome does not depend on which worker runs it.
struct TrialAssignment {
  std::string project_id;
  std::int64_t trial_id = 0;
  int step = 1;
  space::TrialConfig config;
  data::DatasetRef dataset;
  double p_subset = 1.0;
  double train_fraction = 0.8;
  std::uint64_t subset_seed = 0;
  std::uint64_t split_seed = 0;
  std::uint64_t init_seed = 0;
  std::uint64_t train_seed = 0;
  trainer::TrainBudget budget;
  EvaluatorKind evaluator = EvaluatorKind::synthetic;
  std::int64_t n_subset = 0;  // rows drawn by the subset
  std::int64_t n_train = 0;   // training rows after the split
  std::optional<std::int64_t> source_rank;  // Step-1 rank of a retrained trial
  std::string checkpoint;                   // where to save weights; empty = none

  friend bool operator==(const TrialAssignment&, const TrialAssignment&) = default;
};

/// Flat JSON object, the same field names used on the wire and in the ledger.
void to_json(nlohmann::json& j, const TrialAssignment& a);
void from_json(const nlohmann::json& j, TrialAssignment& a);

// --- Messages ---------------------------------------------------------------
//
// Line-delimited JSON, one object per line, serialized with sorted keys and
// no insignificant whitespace. Every message carries "v" and "type".
//
//   worker -> manager
//     {"evaluators":[..],"type":"register","v":1,"worker_id":s}
//     {"type":"heartbeat","v":1,"worker_id":s}
//     {"type":"result","v":1,"trial_id":i,"min_val_mse":f,"best_epoch":i,
//      "epochs_run":i,"param_count":i,"wall_seconds":f,
//      optional "cost_units":f,"stopped_early":b,"n_train":i,"val_mse_history":[f]}
//     {"type":"error","v":1,"trial_id":i,"reason":s, optional "retryable":b}
//   manager -> worker
//     {"type":"assign","v":1, ...TrialAssignment fields...}
//     {"type":"drain","v":1}
//     {"type":"reject","v":1,"code":s,"reason":s}

namespace msg {

struct Register {
  int version = kProtocolVersion;
  std::string worker_id;
  std::vector<EvaluatorKind> evaluators;
};
struct Heartbeat {
  std::string worker_id;
};
struct Result {
  std::int64_t trial_id = 0;
  trainer::TrialResult result;
  double wall_seconds = 0.0;
};
struct Error {
  std::int64_t trial_id = 0;
  std::string reason;
  bool retryable = true;
};
struct Assign {
  TrialAssignment assignment;
};
struct Drain {};
struct Reject {
  std::string code;
  std::string reason;
};

}  // namespace msg

inline constexpr const char* kRejectVersion = "version_mismatch";
inline constexpr const char* kRejectDuplicate = "duplicate_register";

std::string encode(const msg::Register& m);
std::string encode(const msg::Heartbeat& m);
std::string encode(const msg::Result& m);
std::string encode(const msg::Error& m);
std::string encode(const msg::Assign& m);
std::string encode(const msg::Drain& m);
std::string encode(const msg::Reject& m);

/// Parses one line into a JSON object and checks "v" and "type" are present.
/// A register message with a different "v" still parses so the manager can
/// reject it with an explicit code; any other version mismatch throws.
nlohmann::json parse_message(const std::string& line);

msg::Register decode_register(const nlohmann::json& j);
msg::Heartbeat decode_heartbeat(const nlohmann::json& j);
msg::Result decode_result(const nlohmann::json& j);
msg::Error decode_error(const nlohmann::json& j);
msg::Assign decode_assign(const nlohmann::json& j);
msg::Reject decode_reject(const nlohmann::json& j);

/// The assignment file an external adapter hands to a user command is the
/// assign message without "v"/"type"; the command's result file needs at least
/// min_val_mse, epochs_run and param_count.
trainer::TrialResult decode_result_file(const nlohmann::json& j);

}  // namespace twostep::runtime
