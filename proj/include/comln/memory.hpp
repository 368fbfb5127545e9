#pragma once

#include <cstddef>
#include <new>
#include <vector>

namespace comln {

// Byte accounting for the numeric buffers that make up algorithmic state
// (integrator state and stages, unrolled iterates). Counters are per thread,
// so concurrent tasks do not pollute each other's measurements.
class AllocationTracker {
public:
    static void on_allocate(std::size_t bytes) noexcept;
    static void on_deallocate(std::size_t bytes) noexcept;

    static std::size_t live_bytes() noexcept;
    static std::size_t peak_bytes() noexcept;

    // Resets the peak to the current live byte count.
    static void reset_peak() noexcept;
};

// Measures the peak of tracked bytes allocated within a scope, relative to
// the live count at construction.
class PeakScope {
public:
    PeakScope() noexcept;
    PeakScope(const PeakScope&) = delete;
    PeakScope& operator=(const PeakScope&) = delete;

    std::size_t peak_bytes() const noexcept;

private:
    std::size_t baseline_;
};

template <typename T>
struct TrackingAllocator {
    using value_type = T;

    TrackingAllocator() noexcept = default;
    template <typename U>
    TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        T* p = std::allocator<T>{}.allocate(n);
        AllocationTracker::on_allocate(n * sizeof(T));
        return p;
    }

    void deallocate(T* p, std::size_t n) noexcept {
        AllocationTracker::on_deallocate(n * sizeof(T));
        std::allocator<T>{}.deallocate(p, n);
    }

    template <typename U>
    bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, TrackingAllocator<double>>;

} // namespace comln
