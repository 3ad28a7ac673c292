// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace dispro {

/// Outcome of one patient. interval is 1-based; class_id folds interval and
/// censorship into one of 2*I_t classes (dead classes first).
struct SurvivalLabel {
  int censorship = 0;  // 1 = alive / right-censored, 0 = event observed
  double time_months = 0.0;
  int interval = 1;
  int class_id = 1;
};

inline constexpr int class_id_for(int interval, int censorship, int n_intervals) {
  return interval + n_intervals * censorship;
}

// interval of a class id, censorship ignored
inline constexpr int interval_of_class(int class_id, int n_intervals) {
  return ((class_id - 1) % n_intervals) + 1;
}

}  // namespace dispro
