#include "ecgmamba/tape.hpp"

#include <cstring>

#include "ecgmamba/error.hpp"
#include "ecgmamba/runtime.hpp"

namespace ecgmamba {

const Tensor& Var::value() const {
  if (tape == nullptr) throw ContractError("Var is not bound to a tape");
  return tape->value(*this);
}

Var Tape::push_leaf(Tensor value, bool requires_grad) {
  if (!value.defined()) throw ContractError("cannot record an undefined tensor");
  Entry entry;
  entry.value = std::move(value);
  entry.requires_grad = requires_grad;
  entries_.push_back(std::move(entry));
  return Var{this, entries_.size() - 1};
}

Var Tape::constant(Tensor value) { return push_leaf(std::move(value), false); }
Var Tape::variable(Tensor value) { return push_leaf(std::move(value), true); }

Var Tape::record(std::unique_ptr<Function> fn, std::vector<Var> inputs, bool recompute) {
  Entry entry;
  entry.inputs.reserve(inputs.size());
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (in.tape != this) throw ContractError("input recorded on a different tape");
    ensure(in.id);
    entry.inputs.push_back(in.id);
    entry.requires_grad = entry.requires_grad || entries_[in.id].requires_grad;
  }
  for (std::size_t id : entry.inputs) ptrs.push_back(&entries_[id].value);
  entry.value = fn->forward(ptrs);
  entry.flops = fn->flops();
  if (runtime::checked_mode() && !entry.value.all_finite()) {
    throw NonFiniteError("non-finite output from op '" + std::string(fn->name()) + "'");
  }
  entry.fn = std::move(fn);
  entry.recompute = recompute;
  entries_.push_back(std::move(entry));
  return Var{this, entries_.size() - 1};
}

Tensor Tape::run_forward(std::size_t id) {
  Entry& entry = entries_[id];
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(entry.inputs.size());
  for (std::size_t in : entry.inputs) {
    ensure(in);
    ptrs.push_back(&entries_[in].value);
  }
  return entry.fn->forward(ptrs);
}

void Tape::ensure(std::size_t id) {
  Entry& entry = entries_[id];
  if (entry.materialized) return;
  entry.value = run_forward(id);
  entry.materialized = true;
}

const Tensor& Tape::value(Var v) {
  if (v.tape != this || v.id >= entries_.size()) throw ContractError("Var does not belong to this tape");
  ensure(v.id);
  return entries_[v.id].value;
}

bool Tape::requires_grad(Var v) const { return entries_.at(v.id).requires_grad; }

Tensor Tape::grad(Var v) const {
  const Entry& entry = entries_.at(v.id);
  if (entry.fn) throw ContractError("gradients are kept for leaves only");
  if (entry.grad.defined()) return entry.grad;
  return Tensor(entry.value.defined() ? entry.value.shape() : Shape{1}, 0.0);
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("loss recorded on a different tape");
  ensure(loss.id);
  if (entries_[loss.id].value.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + to_string(entries_[loss.id].value.shape()));
  }
  for (Entry& entry : entries_) entry.grad = Tensor();
  if (!entries_[loss.id].requires_grad) return;
  entries_[loss.id].grad = Tensor::ones(entries_[loss.id].value.shape());

  const bool checked = runtime::checked_mode();
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Entry& entry = entries_[i];
    if (!entry.fn || !entry.requires_grad || !entry.grad.defined()) continue;
    ensure(i);
    // std::vector<bool> has no contiguous storage to hand out as a span.
    const std::size_t n_inputs = entry.inputs.size();
    auto needs = std::make_unique<bool[]>(n_inputs);
    std::vector<const Tensor*> ptrs;
    ptrs.reserve(n_inputs);
    for (std::size_t k = 0; k < n_inputs; ++k) {
      ensure(entry.inputs[k]);
      ptrs.push_back(&entries_[entry.inputs[k]].value);
      needs[k] = entries_[entry.inputs[k]].requires_grad;
    }

    std::vector<Tensor> grads =
        entry.fn->backward(ptrs, entry.value, entry.grad, std::span<const bool>(needs.get(), n_inputs));
    if (grads.size() != n_inputs) {
      throw ContractError("op '" + std::string(entry.fn->name()) + "' returned wrong number of gradients");
    }
    for (std::size_t k = 0; k < grads.size(); ++k) {
      Entry& target = entries_[entry.inputs[k]];
      if (!target.requires_grad || !grads[k].defined()) continue;
      if (checked && !grads[k].all_finite()) {
        throw NonFiniteError("non-finite gradient from op '" + std::string(entry.fn->name()) + "'");
      }
      if (grads[k].shape() != target.value.shape()) {
        throw ContractError("op '" + std::string(entry.fn->name()) + "' produced gradient of shape " +
                            to_string(grads[k].shape()) + " for input " + to_string(target.value.shape()));
      }
      if (!target.grad.defined()) {
        target.grad = std::move(grads[k]);
      } else {
        double* dst = target.grad.data();
        const double* src = grads[k].data();
        for (std::size_t j = 0; j < target.grad.size(); ++j) dst[j] += src[j];
      }
    }
    // All consumers of entry i come later on the tape and are already done.
    entry.grad = Tensor();
    if (entry.recompute) {
      entry.value = Tensor();
      entry.materialized = false;
      entry.fn->release_saved();
    }
  }
}

void Tape::release_recomputable() {
  for (Entry& entry : entries_) {
    if (entry.recompute && entry.fn) {
      entry.value = Tensor();
      entry.materialized = false;
      entry.fn->release_saved();
    }
  }
}

std::size_t Tape::stored_bytes() const {
  std::size_t total = saved_context_bytes();
  for (const Entry& entry : entries_) total += entry.value.nbytes();
  return total;
}

std::size_t Tape::saved_context_bytes() const {
  std::size_t total = 0;
  for (const Entry& entry : entries_) {
    if (entry.fn) total += entry.fn->saved_bytes();
  }
  return total;
}

std::uint64_t Tape::total_flops() const {
  std::uint64_t total = 0;
  for (const Entry& entry : entries_) total += entry.flops;
  return total;
}

bool Tape::replay_is_bit_exact() {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    Entry& entry = entries_[i];
    if (!entry.fn) continue;
    ensure(i);
    const Tensor fresh = run_forward(i);
    if (!identical(fresh, entry.value)) return false;
  }
  return true;
}

std::string_view Tape::op_name(std::size_t id) const {
  const Entry& entry = entries_.at(id);
  return entry.fn ? entry.fn->name() : std::string_view("leaf");
}

}  // namespace ecgmamba
