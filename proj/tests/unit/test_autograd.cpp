#include <cmath>
#include <functional>
#include <string>

#include "doctest.h"
#include "efficientspeech/autograd.hpp"
#include "efficientspeech/gradcheck.hpp"
#include "support.hpp"

using namespace es;
using ag::Var;
using es::test::random_away_from_zero;
using es::test::random_tensor;

namespace {

using Builder = std::function<Var<double>(ag::Tape<double>&, const std::vector<Var<double>>&)>;

// Reduces the op output to a smooth scalar against a fixed random target, runs backward, and
// compares every input gradient against central differences. Returns the worst relative error.
double gradcheck_op(Rng& rng, std::vector<Tensor<double>> inputs, const Builder& build) {
  std::vector<Var<double>> vars;
  for (auto& t : inputs) vars.push_back(ag::leaf(t, true));
  Tensor<double> target;
  {
    ag::Tape<double> probe(false);
    target = random_tensor(rng, build(probe, vars)->value.shape());
  }
  auto loss_value = [&] {
    ag::Tape<double> tape(false);
    Var<double> y = build(tape, vars);
    double acc = 0;
    for (std::size_t i = 0; i < target.size(); ++i) acc += (y->value[i] - target[i]) * (y->value[i] - target[i]);
    return acc;
  };
  ag::Tape<double> tape;
  tape.backward(ag::sum_squared_error(tape, build(tape, vars), target));
  double worst = 0;
  for (auto& v : vars) {
    auto numeric = richardson_gradient<double>(loss_value, v->value.data());
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double analytic = v->grad.empty() ? 0.0 : v->grad[i];
      worst = std::max(worst, relative_error(analytic, numeric[i], 1e-3));
    }
  }
  return worst;
}

std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) {
  return static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
}

}  // namespace

TEST_CASE("finite difference oracle examples") {
  std::function<double(std::span<const double>)> sq = [](std::span<const double> x) { return x[0] * x[0]; };
  CHECK(std::abs(finite_difference_gradient(sq, {3.0})[0] - 6.0) <= 1e-8);
  std::function<double(std::span<const double>)> th = [](std::span<const double> x) { return std::tanh(x[0]); };
  CHECK(std::abs(finite_difference_gradient(th, {0.0})[0] - 1.0) <= 1e-9);
}

TEST_CASE("backward of sum of squares is 2x") {
  Rng rng(2);
  auto x = ag::leaf(random_tensor(rng, {3, 4}), true);
  ag::Tape<double> tape;
  tape.backward(ag::sum_squares(tape, x));
  for (std::size_t i = 0; i < x->value.size(); ++i) CHECK(x->grad[i] == doctest::Approx(2 * x->value[i]));
}

TEST_CASE("fan-out accumulates gradients") {
  auto x = ag::leaf(Tensor<double>::matrix({{1.5, -2.0}}), true);
  ag::Tape<double> tape;
  auto y = ag::add(tape, x, x);
  tape.backward(ag::sum_squares(tape, y));
  // d/dx (2x)^2 = 8x
  CHECK(x->grad[0] == doctest::Approx(12.0));
  CHECK(x->grad[1] == doctest::Approx(-16.0));
}

TEST_CASE("tape replays every recorded node exactly once") {
  Rng rng(4);
  auto x = ag::leaf(random_tensor(rng, {2, 3}), true);
  auto w = ag::leaf(random_tensor(rng, {3, 3}), true);
  ag::Tape<double> tape;
  auto h = ag::activation(tape, ops::Activation::tanh, ag::linear(tape, x, w, Var<double>()));
  auto y = ag::add(tape, h, ag::scale(tape, h, 0.5));
  auto loss = ag::sum_squares(tape, y);
  CHECK(tape.backward(loss) == tape.size());
  CHECK(tape.size() == 5);
}

TEST_CASE("backward rejects non-scalar losses") {
  auto x = ag::leaf(Tensor<double>::matrix({{1, 2}}), true);
  ag::Tape<double> tape;
  auto y = ag::scale(tape, x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), ShapeError);
}

TEST_CASE("non-recording tape keeps no nodes") {
  auto x = ag::leaf(Tensor<double>::matrix({{1, 2}}), true);
  ag::Tape<double> tape(false);
  auto y = ag::scale(tape, x, 2.0);
  CHECK(tape.size() == 0);
  CHECK_FALSE(y->requires_grad);
}

TEST_CASE("linear weight gradient matches finite differences") {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = dim(rng, 1, 4), cin = dim(rng, 1, 8), cout = dim(rng, 1, 8);
    CHECK(gradcheck_op(rng, {random_tensor(rng, {n, cin}), random_tensor(rng, {cin, cout}), random_tensor(rng, {cout})},
                       [](auto& t, const auto& v) { return ag::linear(t, v[0], v[1], v[2]); }) <= 1e-6);
  }
}

TEST_CASE("every differentiable op agrees with finite differences (100 seeded trials)") {
  struct Case {
    std::string name;
    std::function<double(Rng&)> run;
  };
  const std::vector<Case> cases = {
      {"matmul",
       [](Rng& r) {
         const std::size_t n = dim(r, 1, 4), k = dim(r, 1, 8), m = dim(r, 1, 8);
         return gradcheck_op(r, {random_tensor(r, {n, k}), random_tensor(r, {k, m})},
                             [](auto& t, const auto& v) { return ag::matmul(t, v[0], v[1]); });
       }},
      {"transpose",
       [](Rng& r) {
         return gradcheck_op(r, {random_tensor(r, {dim(r, 1, 4), dim(r, 1, 8)})},
                             [](auto& t, const auto& v) { return ag::transpose(t, v[0]); });
       }},
      {"add+scale",
       [](Rng& r) {
         Shape s{dim(r, 1, 4), dim(r, 1, 8)};
         return gradcheck_op(r, {random_tensor(r, s), random_tensor(r, s)}, [](auto& t, const auto& v) {
           return ag::add(t, v[0], ag::scale(t, v[1], -1.7));
         });
       }},
      {"softmax",
       [](Rng& r) {
         return gradcheck_op(r, {random_tensor(r, {dim(r, 1, 4), dim(r, 1, 8)}, -3, 3)},
                             [](auto& t, const auto& v) { return ag::softmax_rows(t, v[0]); });
       }},
      {"layer_norm",
       [](Rng& r) {
         const std::size_t c = dim(r, 2, 8), n = dim(r, 1, 4);
         // rows with variance near eps put the curvature scale below any usable step
         auto x = random_tensor(r, {n, c});
         for (bool spread = false; !spread; x = spread ? x : random_tensor(r, {n, c})) {
           spread = true;
           for (std::size_t i = 0; i < n; ++i) {
             double mean = 0, var = 0;
             for (double v : x.row(i)) mean += v / static_cast<double>(c);
             for (double v : x.row(i)) var += (v - mean) * (v - mean) / static_cast<double>(c);
             spread = spread && var >= 1e-2;
           }
         }
         return gradcheck_op(r, {x, random_tensor(r, {c}), random_tensor(r, {c})},
                             [](auto& t, const auto& v) { return ag::layer_norm(t, v[0], v[1], v[2], 1e-5); });
       }},
      {"gelu",
       [](Rng& r) {
         return gradcheck_op(r, {random_tensor(r, {dim(r, 1, 4), dim(r, 1, 8)}, -3, 3)}, [](auto& t, const auto& v) {
           return ag::activation(t, ops::Activation::gelu, v[0]);
         });
       }},
      {"tanh",
       [](Rng& r) {
         return gradcheck_op(r, {random_tensor(r, {dim(r, 1, 4), dim(r, 1, 8)}, -3, 3)}, [](auto& t, const auto& v) {
           return ag::activation(t, ops::Activation::tanh, v[0]);
         });
       }},
      {"relu",
       [](Rng& r) {
         return gradcheck_op(r, {random_away_from_zero(r, {dim(r, 1, 4), dim(r, 1, 8)})}, [](auto& t, const auto& v) {
           return ag::activation(t, ops::Activation::relu, v[0]);
         });
       }},
      {"conv1d",
       [](Rng& r) {
         const std::size_t groups = dim(r, 1, 2), cpg = dim(r, 1, 2), opg = dim(r, 1, 2);
         const std::size_t k = 2 * dim(r, 0, 1) + 1, stride = dim(r, 1, 2), len = dim(r, 3, 8);
         const ops::Conv1dParams p{stride, (k - 1) / 2, groups};
         return gradcheck_op(r,
                             {random_tensor(r, {groups * cpg, len}), random_tensor(r, {groups * opg, cpg, k}),
                              random_tensor(r, {groups * opg})},
                             [p](auto& t, const auto& v) { return ag::conv1d(t, v[0], v[1], v[2], p); });
       }},
      {"conv1d_transposed",
       [](Rng& r) {
         const std::size_t cin = dim(r, 1, 3), cout = dim(r, 1, 3), k = dim(r, 1, 3), stride = dim(r, 1, 2);
         return gradcheck_op(r,
                             {random_tensor(r, {cin, dim(r, 1, 5)}), random_tensor(r, {cin, cout, k}),
                              random_tensor(r, {cout})},
                             [stride](auto& t, const auto& v) { return ag::conv1d_transposed(t, v[0], v[1], v[2], stride); });
       }},
      {"slice+concat",
       [](Rng& r) {
         const std::size_t n = dim(r, 1, 4), c = dim(r, 2, 8);
         return gradcheck_op(r, {random_tensor(r, {n, c}), random_tensor(r, {n, dim(r, 1, 4)})},
                             [c](auto& t, const auto& v) {
                               return ag::concat_cols(t, std::vector<Var<double>>{ag::slice_cols(t, v[0], 1, c - 1), v[1], v[0]});
                             });
       }},
      {"head_rows",
       [](Rng& r) {
         const std::size_t n = dim(r, 2, 4);
         return gradcheck_op(r, {random_tensor(r, {n, dim(r, 1, 8)})},
                             [n](auto& t, const auto& v) { return ag::head_rows(t, v[0], n - 1); });
       }},
      {"gather_rows",
       [](Rng& r) {
         const std::size_t rows = dim(r, 2, 4);
         std::vector<std::size_t> ids;
         for (std::size_t i = 0, n = dim(r, 1, 6); i < n; ++i) ids.push_back(dim(r, 0, rows - 1));
         return gradcheck_op(r, {random_tensor(r, {rows, dim(r, 1, 8)})},
                             [ids](auto& t, const auto& v) { return ag::gather_rows(t, v[0], ids); });
       }},
      {"repeat_rows",
       [](Rng& r) {
         const std::size_t n = dim(r, 1, 4);
         std::vector<std::size_t> counts;
         for (std::size_t i = 0; i < n; ++i) counts.push_back(dim(r, 0, 3));
         counts[0] += 1;
         return gradcheck_op(r, {random_tensor(r, {n, dim(r, 1, 8)})},
                             [counts](auto& t, const auto& v) { return ag::repeat_rows(t, v[0], counts); });
       }},
      {"sum_abs_error",
       [](Rng& r) {
         Shape s{dim(r, 1, 4), dim(r, 1, 8)};
         auto target = random_tensor(r, s);
         auto x = target;
         auto offset = random_away_from_zero(r, s);
         for (std::size_t i = 0; i < x.size(); ++i) x[i] += offset[i];
         return gradcheck_op(r, {x}, [target](auto& t, const auto& v) {
           return ag::sum_abs_error(t, v[0], target);
         });
       }},
      {"self_attention",
       [](Rng& r) {
         const std::size_t heads = dim(r, 1, 2), c = heads * dim(r, 1, 4), n = dim(r, 1, 4);
         return gradcheck_op(r,
                             {random_tensor(r, {n, c}), random_tensor(r, {c, c}), random_tensor(r, {c, c}),
                              random_tensor(r, {c, c}), random_tensor(r, {c, c})},
                             [heads](auto& t, const auto& v) {
                               return ag::self_attention(t, v[0], v[1], v[2], v[3], v[4], heads);
                             });
       }},
  };
  for (const auto& c : cases) {
    Rng rng(1000);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) worst = std::max(worst, c.run(rng));
    INFO(c.name << " worst relative error " << worst);
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("recorded attention matches the tensor kernel") {
  Rng rng(31);
  auto x = random_tensor(rng, {5, 8});
  auto w = [&] { return random_tensor(rng, {8, 8}); };
  auto wq = w(), wk = w(), wv = w(), wo = w();
  auto expected = ops::self_attention_forward(x, wq, wk, wv, wo, 2);
  ag::Tape<double> tape(false);
  auto y = ag::self_attention(tape, ag::leaf(x), ag::leaf(wq), ag::leaf(wk), ag::leaf(wv), ag::leaf(wo), 2);
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(y->value[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("rng is deterministic per seed") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto va = a.next_u64();
    CHECK(va == b.next_u64());
    CHECK(va != c.next_u64());
  }
  Rng u(7);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
  }
}
