#include "finegates/parameters.hpp"

#include "finegates/errors.hpp"

namespace finegates::ad {

Parameter& ParameterStore::add(std::string name, Shape shape, std::vector<double> value, ParamRole role) {
  if (find(name)) throw ContractError("duplicate parameter name '" + name + "'");
  params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(shape), std::move(value), role));
  return *params_.back();
}

Parameter* ParameterStore::find(std::string_view name) noexcept {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

const Parameter* ParameterStore::find(std::string_view name) const noexcept {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

Parameter& ParameterStore::at(std::string_view name) {
  if (auto* p = find(name)) return *p;
  throw ContractError("no parameter named '" + std::string(name) + "'");
}

const Parameter& ParameterStore::at(std::string_view name) const {
  if (const auto* p = find(name)) return *p;
  throw ContractError("no parameter named '" + std::string(name) + "'");
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

}  // namespace finegates::ad
