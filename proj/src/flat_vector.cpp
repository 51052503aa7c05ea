#include "bilevel/flat_vector.hpp"

#include <cmath>
#include <cstring>

namespace bilevel {

GroupLayout::GroupLayout(std::vector<GroupSpec> groups) : groups_(std::move(groups)) {
  offsets_.reserve(groups_.size());
  for (const auto& g : groups_) {
    BL_CHECK_CONFIG(!g.name.empty(), "group with empty name");
    BL_CHECK_CONFIG(g.shape.rows > 0 && g.shape.cols > 0, "group '%s' has empty shape",
                    g.name.c_str());
    offsets_.push_back(total_);
    total_ += g.shape.size();
  }
  for (size_t i = 0; i < groups_.size(); ++i)
    for (size_t j = i + 1; j < groups_.size(); ++j)
      BL_CHECK_CONFIG(groups_[i].name != groups_[j].name, "duplicate group '%s'",
                      groups_[i].name.c_str());
}

int GroupLayout::find(const std::string& name) const {
  for (size_t i = 0; i < groups_.size(); ++i)
    if (groups_[i].name == name) return static_cast<int>(i);
  return -1;
}

int GroupLayout::index_of(const std::string& name) const {
  int i = find(name);
  BL_CHECK_CONFIG(i >= 0, "no group named '%s'", name.c_str());
  return i;
}

bool GroupLayout::operator==(const GroupLayout& o) const {
  if (groups_.size() != o.groups_.size()) return false;
  for (size_t i = 0; i < groups_.size(); ++i)
    if (groups_[i].name != o.groups_[i].name || groups_[i].shape != o.groups_[i].shape)
      return false;
  return true;
}

FlatVector::FlatVector(LayoutPtr layout, std::vector<double> values)
    : layout_(std::move(layout)), v_(std::move(values)) {
  BL_CHECK_SHAPE(static_cast<int>(v_.size()) == layout_->size(),
                 "value count %zu does not match layout size %d", v_.size(), layout_->size());
}

std::span<double> FlatVector::group(const std::string& name) {
  int i = layout_->index_of(name);
  return {v_.data() + layout_->offset(i), static_cast<size_t>(layout_->group(i).shape.size())};
}

std::span<const double> FlatVector::group(const std::string& name) const {
  int i = layout_->index_of(name);
  return {v_.data() + layout_->offset(i), static_cast<size_t>(layout_->group(i).shape.size())};
}

void FlatVector::set_group(const std::string& name, std::span<const double> src) {
  auto dst = group(name);
  BL_CHECK_SHAPE(src.size() == dst.size(), "group '%s' expects %zu values, got %zu",
                 name.c_str(), dst.size(), src.size());
  std::memcpy(dst.data(), src.data(), src.size() * sizeof(double));
}

void FlatVector::axpy(double a, const FlatVector& x) {
  BL_CHECK_SHAPE(x.size() == size(), "axpy size mismatch %d vs %d", x.size(), size());
  for (int i = 0; i < size(); ++i) v_[i] += a * x.v_[i];
}

double FlatVector::dot(const FlatVector& o) const {
  BL_CHECK_SHAPE(o.size() == size(), "dot size mismatch %d vs %d", o.size(), size());
  double s = 0.0;
  for (int i = 0; i < size(); ++i) s += v_[i] * o.v_[i];
  return s;
}

double FlatVector::max_abs() const {
  double m = 0.0;
  for (double e : v_) m = std::max(m, std::fabs(e));
  return m;
}

double FlatVector::norm2() const {
  double s = 0.0;
  for (double e : v_) s += e * e;
  return std::sqrt(s);
}

void FlatVector::check_finite(const char* what) const {
  for (size_t i = 0; i < v_.size(); ++i)
    if (!std::isfinite(v_[i]))
      throw NumericError(detail::strf("non-finite value in %s at index %zu", what, i),
                         static_cast<long>(i));
}

uint64_t hash_bytes(uint64_t h, const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  h ^= 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 0x100000001b3ULL;
  return h;
}

}  // namespace bilevel
