#include "ecgmamba/runtime.hpp"

#include <atomic>
#include <cstdlib>

#include "ecgmamba/error.hpp"

namespace ecgmamba::runtime {

namespace {

std::atomic<int> g_checked{-1};
std::atomic<Fault> g_fault{Fault::none};

}  // namespace

bool checked_mode() {
  int state = g_checked.load(std::memory_order_relaxed);
  if (state < 0) {
    const char* env = std::getenv("ECGMAMBA_CHECKED");
    state = (env != nullptr && std::string_view(env) == "1") ? 1 : 0;
    g_checked.store(state, std::memory_order_relaxed);
  }
  return state == 1;
}

void set_checked_mode(bool enabled) { g_checked.store(enabled ? 1 : 0, std::memory_order_relaxed); }

Fault active_fault() { return g_fault.load(std::memory_order_relaxed); }
void set_fault(Fault fault) { g_fault.store(fault, std::memory_order_relaxed); }

Fault parse_fault(std::string_view name) {
  if (name == "none") return Fault::none;
  if (name == "scan-backward-sign") return Fault::scan_backward_sign_flip;
  throw ConfigError("unknown fault '" + std::string(name) + "'");
}

}  // namespace ecgmamba::runtime
