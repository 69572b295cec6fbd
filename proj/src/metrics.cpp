#include "cptrd/metrics.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace cptrd {

RMatrix::RMatrix(int tasks) : grid_(Matrix::Constant(tasks + 1, tasks, kAbsent)) {
  if (tasks < 0) throw std::invalid_argument("RMatrix: negative task count");
}

void RMatrix::set(int j, int i, double f1) {
  if (j < 0 || j > tasks() || i < 1 || i > tasks()) throw std::out_of_range("RMatrix: index out of range");
  if (!(f1 >= 0.0 && f1 <= 100.0)) throw std::invalid_argument("RMatrix: F1 outside [0, 100]");
  grid_(j, i - 1) = f1;
}

std::string RMatrix::to_csv(const std::vector<std::string>& task_names) const {
  if (static_cast<int>(task_names.size()) != tasks()) throw std::invalid_argument("to_csv: wrong number of task names");
  std::ostringstream out;
  out << "row";
  for (const auto& n : task_names) out << ',' << n;
  out << '\n';
  char buf[32];
  for (int j = 0; j <= tasks(); ++j) {
    if (j == 0)
      out << "baseline";
    else
      out << j;
    for (int i = 1; i <= tasks(); ++i) {
      out << ',';
      if (has(j, i)) {
        std::snprintf(buf, sizeof buf, "%.17g", (*this)(j, i));
        out << buf;
      }
    }
    out << '\n';
  }
  return out.str();
}

bool RMatrix::operator==(const RMatrix& o) const {
  if (grid_.rows() != o.grid_.rows() || grid_.cols() != o.grid_.cols()) return false;
  for (Eigen::Index k = 0; k < grid_.size(); ++k) {
    const double a = grid_.data()[k], b = o.grid_.data()[k];
    if (!(a == b || (std::isnan(a) && std::isnan(b)))) return false;
  }
  return true;
}

namespace {
double need(const RMatrix& r, int j, int i) {
  if (!r.has(j, i)) throw std::invalid_argument("R[" + std::to_string(j) + "][" + std::to_string(i) + "] is missing");
  return r(j, i);
}
}  // namespace

double avg_f1(const RMatrix& r) {
  const int n = r.tasks();
  if (n < 1) throw std::invalid_argument("avg_f1: empty R matrix");
  double s = 0;
  for (int i = 1; i <= n; ++i) s += need(r, n, i);
  return s / n;
}

std::optional<double> bwt(const RMatrix& r) {
  const int n = r.tasks();
  if (n < 2) return std::nullopt;
  double s = 0;
  for (int i = 1; i < n; ++i) s += need(r, n, i) - need(r, i, i);
  return s / (n - 1);
}

std::optional<double> fwt(const RMatrix& r) {
  const int n = r.tasks();
  if (n < 2) return std::nullopt;
  double s = 0;
  for (int i = 2; i <= n; ++i) s += need(r, i - 1, i) - need(r, 0, i);
  return s / (n - 1);
}

double fs_f1(const std::vector<std::map<int, double>>& few_shot_per_task, int k) {
  if (few_shot_per_task.empty()) throw std::invalid_argument("fs_f1: no tasks");
  double s = 0;
  for (std::size_t t = 0; t < few_shot_per_task.size(); ++t) {
    const auto it = few_shot_per_task[t].find(k);
    if (it == few_shot_per_task[t].end())
      throw std::invalid_argument("fs_f1: task " + std::to_string(t + 1) + " has no " + std::to_string(k) + "-shot record");
    s += it->second;
  }
  return s / static_cast<double>(few_shot_per_task.size());
}

double f1_score(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.empty() || predictions.size() != labels.size())
    throw std::invalid_argument("f1_score: predictions and labels must be non-empty and aligned");
  long tp[2] = {0, 0}, fp[2] = {0, 0}, fn[2] = {0, 0};
  for (std::size_t k = 0; k < labels.size(); ++k) {
    const int p = predictions[k], y = labels[k];
    if ((p != 0 && p != 1) || (y != 0 && y != 1)) throw std::invalid_argument("f1_score: labels must be 0 or 1");
    if (p == y) {
      ++tp[y];
    } else {
      ++fp[p];
      ++fn[y];
    }
  }
  double macro = 0;
  for (int c = 0; c < 2; ++c) {
    const long denom = 2 * tp[c] + fp[c] + fn[c];
    macro += denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
  }
  return 100.0 * macro / 2.0;
}

}  // namespace cptrd
