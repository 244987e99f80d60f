#pragma once

#include <string>
#include <string_view>

namespace ecgmamba::runtime {

/// Finite-value assertions on every recorded op. Initialised from the
/// ECGMAMBA_CHECKED environment variable ("1" enables) on first query.
bool checked_mode();
void set_checked_mode(bool enabled);

/// Deliberate defects used to prove that the verification suite notices a
/// broken kernel. Never active unless a caller opts in.
enum class Fault { none, scan_backward_sign_flip };

Fault active_fault();
void set_fault(Fault fault);
Fault parse_fault(std::string_view name);

class ScopedFault {
 public:
  explicit ScopedFault(Fault fault) : previous_(active_fault()) { set_fault(fault); }
  ~ScopedFault() { set_fault(previous_); }
  ScopedFault(const ScopedFault&) = delete;
  ScopedFault& operator=(const ScopedFault&) = delete;

 private:
  Fault previous_;
};

class ScopedCheckedMode {
 public:
  explicit ScopedCheckedMode(bool enabled) : previous_(checked_mode()) { set_checked_mode(enabled); }
  ~ScopedCheckedMode() { set_checked_mode(previous_); }
  ScopedCheckedMode(const ScopedCheckedMode&) = delete;
  ScopedCheckedMode& operator=(const ScopedCheckedMode&) = delete;

 private:
  bool previous_;
};

}  // namespace ecgmamba::runtime
