#include "tensor/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace magmix {

namespace {

double eval_constant(const ScalarFn& f, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape(GradMode::Off);
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(tape.input(t));
  return f(tape, vars).value()[0];
}

double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

}  // namespace

double finite_diff_check(const ScalarFn& f, const std::vector<Tensor<double>>& inputs, double h) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  Var<double> out = f(tape, leaves);
  tape.backward(out);

  double worst = 0.0;
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<double>& grad = leaves[k].grad();
    for (Index i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      probe[k][i] = orig + h;
      const double fp = eval_constant(f, probe);
      probe[k][i] = orig - h;
      const double fm = eval_constant(f, probe);
      probe[k][i] = orig;
      const double analytic = leaves[k].has_grad() ? grad[i] : 0.0;
      worst = std::max(worst, rel_err(analytic, (fp - fm) / (2.0 * h)));
    }
  }
  return worst;
}

double finite_diff_check(const std::function<Var<double>(Tape<double>&, const Var<double>&)>& f,
                         const Tensor<double>& x, double h) {
  return finite_diff_check(
      [&f](Tape<double>& tape, const std::vector<Var<double>>& v) { return f(tape, v[0]); }, {x}, h);
}

double finite_diff_check_params(const ParamScalarFn& f, const std::vector<Parameter<double>*>& params, double h) {
  for (Parameter<double>* p : params) p->zero_grad();
  {
    Tape<double> tape;
    Var<double> out = f(tape);
    tape.backward(out);
  }
  auto eval = [&f] {
    Tape<double> tape(GradMode::Off);
    return f(tape).value()[0];
  };
  double worst = 0.0;
  for (Parameter<double>* p : params) {
    for (Index i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double fp = eval();
      p->value[i] = orig - h;
      const double fm = eval();
      p->value[i] = orig;
      worst = std::max(worst, rel_err(p->grad[i], (fp - fm) / (2.0 * h)));
    }
  }
  return worst;
}

}  // namespace magmix
