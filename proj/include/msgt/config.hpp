#pragma once

#include <string>
#include <utility>

#include "msgt/data.hpp"
#include "msgt/train.hpp"

namespace msgt {

struct DataConfig {
  std::string source = "synthetic-textures";  // or "idx-files"
  Index train_size = 2048;
  Index val_size = 512;
  double noise = 0.1;
  std::uint64_t seed = 7;
  std::string train_images, train_labels, val_images, val_labels;
};

struct RunConfig {
  TrainConfig train;
  DataConfig data;
};

// JSON schema (every key optional, unknown keys rejected):
//   arch            preset name: micro, msg-t, msg-s, msg-b
//   task            cls | det-backbone
//   stages          up to four {dim, heads, blocks} overrides
//   window_size     applied to every stage
//   shuffle_sizes   four region sizes
//   input_size, in_channels, num_classes, use_msg, manipulation,
//   msg_input_policy, drop_path
//   optimizer       {lr, weight_decay, betas: [b1, b2], eps}
//   schedule        {total_steps, warmup_steps, min_lr, batch_size, eval_every,
//                    eval_batch_size, label_smoothing}
//   data            {source, train_size, val_size, noise, seed, train_images,
//                    train_labels, val_images, val_labels}
//   seed, record_time
// Throws ConfigurationError naming the offending key.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string dump_run_config(const RunConfig& cfg);

// Train and validation sets described by the data section, sized to the
// architecture input.
std::pair<Dataset, Dataset> load_datasets(const RunConfig& cfg);

}  // namespace msgt
