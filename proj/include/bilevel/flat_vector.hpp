#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bilevel/error.hpp"

namespace bilevel {

struct Shape {
  int rows = 1;
  int cols = 1;
  int size() const { return rows * cols; }
  bool operator==(const Shape& o) const { return rows == o.rows && cols == o.cols; }
  bool operator!=(const Shape& o) const { return !(*this == o); }
};

struct GroupSpec {
  std::string name;
  Shape shape;
};

// Immutable description of how named groups tile one flat value array.
// Offsets are assigned in declaration order, are disjoint and cover the
// whole length.
class GroupLayout {
 public:
  GroupLayout() = default;
  explicit GroupLayout(std::vector<GroupSpec> groups);

  int size() const { return total_; }
  int group_count() const { return static_cast<int>(groups_.size()); }
  const GroupSpec& group(int i) const { return groups_[i]; }
  int offset(int i) const { return offsets_[i]; }

  bool has(const std::string& name) const { return find(name) >= 0; }
  int find(const std::string& name) const;  // -1 if absent
  int index_of(const std::string& name) const;  // throws if absent
  int offset_of(const std::string& name) const { return offsets_[index_of(name)]; }
  const Shape& shape_of(const std::string& name) const {
    return groups_[index_of(name)].shape;
  }

  bool operator==(const GroupLayout& o) const;

 private:
  std::vector<GroupSpec> groups_;
  std::vector<int> offsets_;
  int total_ = 0;
};

using LayoutPtr = std::shared_ptr<const GroupLayout>;

inline LayoutPtr make_layout(std::vector<GroupSpec> groups) {
  return std::make_shared<const GroupLayout>(std::move(groups));
}

// Flat 64-bit value storage addressed through a shared GroupLayout.
class FlatVector {
 public:
  FlatVector() : layout_(std::make_shared<const GroupLayout>()) {}
  explicit FlatVector(LayoutPtr layout)
      : layout_(std::move(layout)), v_(layout_->size(), 0.0) {}
  FlatVector(LayoutPtr layout, std::vector<double> values);

  const GroupLayout& layout() const { return *layout_; }
  const LayoutPtr& layout_ptr() const { return layout_; }
  int size() const { return static_cast<int>(v_.size()); }

  std::span<double> values() { return v_; }
  std::span<const double> values() const { return v_; }
  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  double operator[](int i) const { return v_[i]; }
  double& operator[](int i) { return v_[i]; }

  std::span<double> group(const std::string& name);
  std::span<const double> group(const std::string& name) const;
  void set_group(const std::string& name, std::span<const double> src);

  void fill(double x) { for (double& e : v_) e = x; }
  void axpy(double a, const FlatVector& x);  // *this += a * x
  void scale(double a) { for (double& e : v_) e *= a; }
  double dot(const FlatVector& o) const;
  double max_abs() const;
  double norm2() const;

  // Throws NumericError naming `what` if any entry is non-finite.
  void check_finite(const char* what) const;

 private:
  LayoutPtr layout_;
  std::vector<double> v_;
};

uint64_t hash_bytes(uint64_t h, const void* data, size_t n);

}  // namespace bilevel
