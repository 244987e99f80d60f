#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "ecgmamba/tensor.hpp"

namespace ecgmamba {

/// A differentiable operation. `forward` may stash context needed by
/// `backward`; `release_saved` drops it again.
class Function {
 public:
  virtual ~Function() = default;

  virtual std::string_view name() const = 0;
  virtual Tensor forward(std::span<const Tensor* const> inputs) = 0;

  /// One gradient per input. An undefined Tensor means "no contribution";
  /// entries with `needs_grad[i] == false` may be left undefined.
  virtual std::vector<Tensor> backward(std::span<const Tensor* const> inputs, const Tensor& output,
                                       const Tensor& grad_output, std::span<const bool> needs_grad) = 0;

  /// Bytes of context held between forward and backward.
  virtual std::size_t saved_bytes() const { return 0; }
  virtual void release_saved() {}
  /// Floating point operations performed by the most recent forward.
  virtual std::uint64_t flops() const { return 0; }
};

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Ordered record of operations for reverse-mode differentiation.
///
/// Entries are appended in execution order, so every entry's inputs precede
/// it. Entries recorded with `recompute = true` may have their values
/// discarded after the forward pass (`release_recomputable`); they are
/// regenerated from their inputs when backward needs them.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  Var record(std::unique_ptr<Function> fn, std::vector<Var> inputs, bool recompute = false);

  const Tensor& value(Var v);
  bool requires_grad(Var v) const;
  /// Gradient accumulated at leaf `v` by the last backward; zeros if none
  /// reached it. Gradients of recorded entries are dropped as soon as they
  /// have been propagated, so asking for one throws ContractError.
  Tensor grad(Var v) const;

  /// Reverse accumulation from a scalar loss.
  void backward(Var loss);

  void release_recomputable();
  /// Bytes held in recorded values plus op-saved context.
  std::size_t stored_bytes() const;
  std::size_t saved_context_bytes() const;
  std::uint64_t total_flops() const;

  /// Re-executes every op from the current leaf values and checks that each
  /// output is reproduced bit for bit.
  bool replay_is_bit_exact();

  std::size_t size() const { return entries_.size(); }
  std::string_view op_name(std::size_t id) const;

 private:
  struct Entry {
    std::unique_ptr<Function> fn;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool recompute = false;
    bool materialized = true;
    std::uint64_t flops = 0;
  };

  Var push_leaf(Tensor value, bool requires_grad);
  void ensure(std::size_t id);
  Tensor run_forward(std::size_t id);

  std::vector<Entry> entries_;
};

}  // namespace ecgmamba
