#pragma once

#include <cstddef>
#include <map>
#include <string>

namespace eqprop {

/// Logical byte accounting for retained training buffers (element count times
/// element width). Allocator overhead is not counted.
class MemoryLedger {
 public:
  /// Releases its bytes on destruction.
  class Handle {
   public:
    Handle() = default;
    Handle(MemoryLedger* owner, std::size_t bytes) : owner_(owner), bytes_(bytes) {}
    Handle(Handle&& o) noexcept : owner_(o.owner_), bytes_(o.bytes_) { o.owner_ = nullptr; }
    Handle& operator=(Handle&& o) noexcept {
      if (this != &o) {
        release();
        owner_ = o.owner_;
        bytes_ = o.bytes_;
        o.owner_ = nullptr;
      }
      return *this;
    }
    Handle(const Handle&) = delete;
    Handle& operator=(const Handle&) = delete;
    ~Handle() { release(); }

    void release();
    std::size_t bytes() const { return bytes_; }

   private:
    MemoryLedger* owner_ = nullptr;
    std::size_t bytes_ = 0;
  };

  Handle track(const std::string& label, std::size_t bytes);
  void set_phase(const std::string& phase);

  std::size_t current() const { return current_; }
  std::size_t peak() const { return peak_; }
  const std::map<std::string, std::size_t>& peak_by_phase() const { return phase_peak_; }
  const std::map<std::string, std::size_t>& bytes_by_label() const { return label_bytes_; }
  std::size_t registrations() const { return registrations_; }

 private:
  void release(std::size_t bytes);
  void bump();

  std::string phase_ = "default";
  std::size_t current_ = 0;
  std::size_t peak_ = 0;
  std::size_t registrations_ = 0;
  std::map<std::string, std::size_t> phase_peak_;
  std::map<std::string, std::size_t> label_bytes_;  // cumulative registered bytes per label
};

/// Peak retained bytes of one instrumented training step.
struct MemoryReport {
  std::string method;
  std::size_t peak_bytes = 0;
  std::map<std::string, std::size_t> peak_by_phase;
};

inline MemoryReport memory_report(const std::string& method, const MemoryLedger& ledger) {
  return {method, ledger.peak(), ledger.peak_by_phase()};
}

}  // namespace eqprop
