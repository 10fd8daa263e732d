#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "finegates/autodiff.hpp"

namespace finegates::ad {

/// Owns parameters with stable addresses, in registration order.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter& add(std::string name, Shape shape, std::vector<double> value, ParamRole role);
  Parameter* find(std::string_view name) noexcept;
  const Parameter* find(std::string_view name) const noexcept;
  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;

  std::size_t size() const noexcept { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad();

  template <class F>
  void for_each(F&& f) {
    for (auto& p : params_) f(*p);
  }
  template <class F>
  void for_each(F&& f) const {
    for (const auto& p : params_) f(static_cast<const Parameter&>(*p));
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

}  // namespace finegates::ad
