#pragma once

// Deliberate defects that the `verify` command can switch on to prove each
// oracle detects a broken implementation. All off in normal operation.

namespace clipbench {

struct FaultHooks {
  bool filip_tiebreak = false;       // token argmax keeps the highest index on ties
  bool matmul_grad = false;          // matmul backward drops half of dA
  bool info_nce_transpose = false;   // text-side CLIP loss reuses the image-side logits
  bool queue_fifo = false;           // NN queue overwrites the newest entry instead of the oldest

  bool any() const { return filip_tiebreak || matmul_grad || info_nce_transpose || queue_fifo; }
};

inline FaultHooks& faults() {
  static FaultHooks hooks;
  return hooks;
}

}  // namespace clipbench
