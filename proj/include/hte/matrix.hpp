#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace hte {

// Covariate matrix with column names. The names feed a schema hash that
// fitted models use to reject inputs with a different column layout.
struct FeatureMatrix {
  Eigen::MatrixXd values;
  std::vector<std::string> names;

  std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(values.cols()); }
  double operator()(std::size_t r, std::size_t c) const {
    return values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  }

  std::uint64_t schema_hash() const;

  FeatureMatrix select_rows(const std::vector<std::size_t>& rows) const;
};

// FNV-1a over the column names and count.
std::uint64_t schema_hash(const std::vector<std::string>& names);

}  // namespace hte
