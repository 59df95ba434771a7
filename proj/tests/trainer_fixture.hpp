#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>

#include "clipbench/trainer.hpp"
#include "clipbench/verify.hpp"

namespace clipbench::testing {

inline std::string fresh_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("clipbench_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

inline std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

inline TrainingData tiny_data(std::size_t classes = 3, std::size_t per_class = 8, std::size_t val_per_class = 2) {
  TrainingData d;
  auto train = generate_synthetic(classes, per_class, 1, 8);
  auto val = generate_synthetic(classes, val_per_class, 2, 8);
  d.train = train.records;
  d.val = val.records;
  d.class_names = train.class_names;
  return d;
}

inline TrainSetup tiny_setup(Variant v, const std::string& out_dir, std::size_t epochs = 2) {
  TrainSetup s;
  s.model = FullStackFixture::tiny_config();
  s.model.text.vocab_size = 40;
  s.model.text.context_length = 12;
  s.train.epochs = epochs;
  s.train.batch_size = 4;
  s.train.variant = v;
  s.train.seed = 5;
  s.loss = LossConfig::preset(v);
  s.loss.nn_queue_capacity = 16;
  s.out_dir = out_dir;
  return s;
}

}  // namespace clipbench::testing
