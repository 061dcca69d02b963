#include "eqprop/memory.hpp"

#include <algorithm>

namespace eqprop {

void MemoryLedger::Handle::release() {
  if (owner_) owner_->release(bytes_);
  owner_ = nullptr;
}

MemoryLedger::Handle MemoryLedger::track(const std::string& label, std::size_t bytes) {
  current_ += bytes;
  label_bytes_[label] += bytes;
  ++registrations_;
  bump();
  return Handle(this, bytes);
}

void MemoryLedger::set_phase(const std::string& phase) {
  phase_ = phase;
  bump();
}

void MemoryLedger::release(std::size_t bytes) { current_ -= std::min(bytes, current_); }

void MemoryLedger::bump() {
  peak_ = std::max(peak_, current_);
  auto& p = phase_peak_[phase_];
  p = std::max(p, current_);
}

}  // namespace eqprop
