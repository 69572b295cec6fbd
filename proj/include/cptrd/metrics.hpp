#pragma once

#include "cptrd/tensor.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cptrd {

// R[j][i]: F1 (percent) on task i's test set after training through task j.
// Rows j = 0..N (row 0 = untrained baseline), tasks i = 1..N. Absent
// entries are NaN.
class RMatrix {
 public:
  explicit RMatrix(int tasks = 0);

  int tasks() const { return static_cast<int>(grid_.cols()); }
  double operator()(int j, int i) const { return grid_(j, i - 1); }
  void set(int j, int i, double f1);
  bool has(int j, int i) const { return !std::isnan(grid_(j, i - 1)); }

  const Matrix& grid() const { return grid_; }  // (N+1) x N, column i-1 = task i

  // Header "row,<task names>", then "baseline,..." and "1,...".."N,...";
  // absent entries are empty fields.
  std::string to_csv(const std::vector<std::string>& task_names) const;

  bool operator==(const RMatrix& other) const;

 private:
  Matrix grid_;
};

inline constexpr double kAbsent = std::numeric_limits<double>::quiet_NaN();

// (1/N) sum_i R[N][i]. Throws std::invalid_argument when row N is incomplete.
double avg_f1(const RMatrix& r);
// (1/(N-1)) sum_{i<N} (R[N][i] - R[i][i]); absent when N < 2.
std::optional<double> bwt(const RMatrix& r);
// (1/(N-1)) sum_{i>=2} (R[i-1][i] - R[0][i]); absent when N < 2.
std::optional<double> fwt(const RMatrix& r);

// Mean of per-task few-shot F1 for shot count k. Throws when a task lacks k.
double fs_f1(const std::vector<std::map<int, double>>& few_shot_per_task, int k);

// Macro-F1 over {non-rumor, rumor}, in percent. A class with no true
// positives contributes 0.
double f1_score(std::span<const int> predictions, std::span<const int> labels);

}  // namespace cptrd
