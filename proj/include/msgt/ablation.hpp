#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "msgt/train.hpp"

namespace msgt {

enum class AblationMode { NoMsg, MsgNoShuffle, MsgShuffle, MsgAverage, MsgShift, RerandomizeInputMsg, ShuffleSizeSweep };

AblationMode parse_ablation_mode(std::string_view name);
std::string to_string(AblationMode mode);

struct AblationVariant {
  std::string name;
  ArchConfig arch;
};

// The configurations a mode compares. The first entry is the reference
// (MSG tokens with shuffle at the base shuffle sizes) except for the sweep,
// whose rows are the three size schedules.
std::vector<AblationVariant> ablation_variants(AblationMode mode, const ArchConfig& base);

// Compares parameter names and shapes of a variant against the reference
// and throws ContractError if anything beyond the named knob differs.
// Returns the parameter-count delta (variant - reference).
Index assert_single_knob(AblationMode mode, const ArchConfig& reference, const ArchConfig& variant);

struct AblationRow {
  std::string variant;
  std::string manipulation;
  std::string shuffle_sizes;
  bool use_msg = true;
  Index params = 0;
  Index params_delta = 0;  // against the first row
  Index msg_related = 0;
  Index sequence_length = 0;  // tokens per stage-1 window
  double val_loss = 0.0;
  double val_top1 = 0.0;
  double seconds = 0.0;
};

inline constexpr const char* kAblationHeader =
    "mode,variant,manipulation,shuffle_sizes,use_msg,params,params_delta,msg_related,sequence_length,val_loss,"
    "val_top1,seconds";

struct AblationReport {
  AblationMode mode = AblationMode::MsgShuffle;
  std::vector<AblationRow> rows;

  std::string csv() const;
};

// Trains and evaluates every variant with the shared seed. For
// rerandomize-input-msg nothing is retrained beyond the single reference
// model (or `trained` when given); its MSG inputs are re-sampled for
// `rerandomize_draws` evaluations. Writes ablation.csv into out_dir when set.
AblationReport ablate(AblationMode mode, const TrainConfig& base, const Dataset& train_data, const Dataset& val_data,
                      const std::string& out_dir = "", const ModelParams<float>* trained = nullptr,
                      int rerandomize_draws = 3);

}  // namespace msgt
