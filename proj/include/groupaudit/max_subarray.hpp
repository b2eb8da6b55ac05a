#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>

namespace groupaudit {

template <typename T>
struct SubarrayMax {
  T value{};
  std::size_t first = 0;  // inclusive
  std::size_t last = 0;   // inclusive
};

// Largest sum over all non-empty contiguous runs (Kadane). Ties keep the
// earliest-ending run, and within it the shortest one.
template <typename T>
SubarrayMax<T> max_subarray(std::span<const T> a) {
  if (a.empty()) throw std::invalid_argument("max_subarray of an empty sequence");
  SubarrayMax<T> best{a[0], 0, 0};
  T run = a[0];
  std::size_t start = 0;
  for (std::size_t i = 1; i < a.size(); ++i) {
    if (run > T{}) {
      run += a[i];
    } else {
      run = a[i];
      start = i;
    }
    if (run > best.value) best = {run, start, i};
  }
  return best;
}

}  // namespace groupaudit
