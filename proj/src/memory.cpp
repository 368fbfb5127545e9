#include "comln/memory.hpp"

#include <algorithm>

namespace comln {

namespace {
thread_local std::size_t g_live = 0;
thread_local std::size_t g_peak = 0;
} // namespace

void AllocationTracker::on_allocate(std::size_t bytes) noexcept {
    g_live += bytes;
    g_peak = std::max(g_peak, g_live);
}

void AllocationTracker::on_deallocate(std::size_t bytes) noexcept {
    g_live -= std::min(bytes, g_live);
}

std::size_t AllocationTracker::live_bytes() noexcept { return g_live; }
std::size_t AllocationTracker::peak_bytes() noexcept { return g_peak; }
void AllocationTracker::reset_peak() noexcept { g_peak = g_live; }

PeakScope::PeakScope() noexcept : baseline_(AllocationTracker::live_bytes()) {
    AllocationTracker::reset_peak();
}

std::size_t PeakScope::peak_bytes() const noexcept {
    return AllocationTracker::peak_bytes() - baseline_;
}

} // namespace comln
