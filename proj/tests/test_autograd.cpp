#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "deblur/autograd.hpp"
#include "deblur/losses.hpp"
#include "support/synthetic.hpp"

using namespace deblur;
using deblur::fixtures::random_tensor;

namespace {

void fill_normal(Parameter& p, std::mt19937_64& rng, float std = 0.3f) {
  std::normal_distribution<float> n(0.0f, std);
  for (auto& v : p.value) v = n(rng);
}

// Direct convolution in double precision.
Tensor naive_conv(const Tensor& x, const Parameter& w, const Parameter& b, int stride, int pad) {
  const int out_c = w.dims[0], in_c = w.dims[1], k = w.dims[2];
  const int oh = (x.height() + 2 * pad - k) / stride + 1;
  const int ow = (x.width() + 2 * pad - k) / stride + 1;
  Tensor y(out_c, oh, ow);
  for (int o = 0; o < out_c; ++o)
    for (int yy = 0; yy < oh; ++yy)
      for (int xx = 0; xx < ow; ++xx) {
        double acc = b.value[o];
        for (int i = 0; i < in_c; ++i)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = yy * stride - pad + ky, ix = xx * stride - pad + kx;
              if (iy < 0 || ix < 0 || iy >= x.height() || ix >= x.width()) continue;
              acc += double(w.value[((o * in_c + i) * k + ky) * k + kx]) * x.at(i, iy, ix);
            }
        y.at(o, yy, xx) = static_cast<float>(acc);
      }
  return y;
}

// Transposed convolution as the scatter of every input pixel.
Tensor naive_conv_transpose(const Tensor& x, const Parameter& w, const Parameter& b, int stride, int pad) {
  const int in_c = w.dims[0], out_c = w.dims[1], k = w.dims[2];
  const int oh = (x.height() - 1) * stride - 2 * pad + k;
  const int ow = (x.width() - 1) * stride - 2 * pad + k;
  std::vector<double> acc(static_cast<std::size_t>(out_c) * oh * ow, 0.0);
  for (int i = 0; i < in_c; ++i)
    for (int yy = 0; yy < x.height(); ++yy)
      for (int xx = 0; xx < x.width(); ++xx)
        for (int o = 0; o < out_c; ++o)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int oy = yy * stride - pad + ky, ox = xx * stride - pad + kx;
              if (oy < 0 || ox < 0 || oy >= oh || ox >= ow) continue;
              acc[(static_cast<std::size_t>(o) * oh + oy) * ow + ox] +=
                  double(w.value[((i * out_c + o) * k + ky) * k + kx]) * x.at(i, yy, xx);
            }
  Tensor y(out_c, oh, ow);
  for (int o = 0; o < out_c; ++o)
    for (int p = 0; p < oh * ow; ++p) y[o * oh * ow + p] = static_cast<float>(acc[o * oh * ow + p] + b.value[o]);
  return y;
}

void expect_close(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], tol) << "at " << i;
}

// Scalar objective: mean squared distance of the graph output to a fixed
// target, evaluated in double from the float forward values.
struct Objective {
  std::function<Var(Tape&, Var)> graph;
  Tensor target;

  double value(const Tensor& input) const {
    Tape tape(false);
    Var out = graph(tape, tape.constant(input));
    return primary_loss(out->value.cast<double>(), target.cast<double>());
  }
};

double relative_error(const std::vector<double>& fd, const std::vector<double>& an) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    num += (fd[i] - an[i]) * (fd[i] - an[i]);
    den += an[i] * an[i];
  }
  return std::sqrt(num / std::max(den, 1e-30));
}

// Checks d(objective)/d(input) and d(objective)/d(params) against central
// differences.
void check_gradients(const Objective& obj, Tensor input, std::vector<Parameter*> params, double h, double tol) {
  for (auto* p : params) std::fill(p->grad.begin(), p->grad.end(), 0.0f);
  Tape tape;
  Var x = tape.variable(input);
  Var out = obj.graph(tape, x);
  ASSERT_EQ(out->value.shape(), obj.target.shape());
  tape.backward(ops::primary_loss(out, obj.target));

  std::vector<double> fd, an;
  for (std::size_t i = 0; i < input.size(); ++i) {
    const float keep = input[i];
    input[i] = keep + h;
    const double up = obj.value(input);
    input[i] = keep - h;
    const double down = obj.value(input);
    input[i] = keep;
    fd.push_back((up - down) / (2 * h));
    an.push_back(x->grad.empty() ? 0.0 : x->grad[i]);
  }
  EXPECT_LT(relative_error(fd, an), tol) << "input gradient";

  for (auto* p : params) {
    fd.clear();
    an.clear();
    for (std::size_t i = 0; i < p->numel(); ++i) {
      const float keep = p->value[i];
      p->value[i] = keep + h;
      const double up = obj.value(input);
      p->value[i] = keep - h;
      const double down = obj.value(input);
      p->value[i] = keep;
      fd.push_back((up - down) / (2 * h));
      an.push_back(p->grad[i]);
    }
    EXPECT_LT(relative_error(fd, an), tol) << p->name;
  }
}

}  // namespace

TEST(Conv, MatchesDirectConvolution) {
  std::mt19937_64 rng(1);
  for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, {5, 1, 2}, {5, 2, 2}, {1, 1, 0}, {3, 2, 0}, {4, 2, 1}}) {
    ParameterSet ps;
    ps.add("w", {4, 3, k, k});
    ps.add("b", {4});
    Parameter& w = ps.get("w");
    Parameter& b = ps.get("b");
    fill_normal(w, rng);
    fill_normal(b, rng);
    const Tensor x = random_tensor(Shape{3, 9, 11}, rng, -1, 1);
    Tape tape(false);
    const Tensor y = ops::conv2d(tape.constant(x), w, b, stride, pad)->value;
    expect_close(y, naive_conv(x, w, b, stride, pad), 1e-5);
  }
}

TEST(ConvTranspose, MatchesScatterDefinition) {
  std::mt19937_64 rng(2);
  for (auto [k, stride, pad] : {std::tuple{4, 2, 1}, {3, 1, 1}, {2, 2, 0}, {3, 2, 1}}) {
    ParameterSet ps;
    ps.add("w", {3, 5, k, k});
    ps.add("b", {5});
    Parameter& w = ps.get("w");
    Parameter& b = ps.get("b");
    fill_normal(w, rng);
    fill_normal(b, rng);
    const Tensor x = random_tensor(Shape{3, 6, 7}, rng, -1, 1);
    Tape tape(false);
    const Tensor y = ops::conv_transpose2d(tape.constant(x), w, b, stride, pad)->value;
    expect_close(y, naive_conv_transpose(x, w, b, stride, pad), 1e-5);
  }
}

TEST(Kernels, Col2imIsTheAdjointOfIm2col) {
  std::mt19937_64 rng(3);
  const int c = 2, h = 7, w = 6, k = 3, stride = 2, pad = 1;
  const int oh = (h + 2 * pad - k) / stride + 1, ow = (w + 2 * pad - k) / stride + 1;
  const Tensor x = random_tensor(Shape{c, h, w}, rng, -1, 1);
  std::vector<float> col(static_cast<std::size_t>(c) * k * k * oh * ow);
  kernels::im2col(x.data(), c, h, w, k, stride, pad, oh, ow, col.data());
  std::vector<float> r(col.size());
  std::normal_distribution<float> n;
  for (auto& v : r) v = n(rng);
  Tensor back(Shape{c, h, w});
  kernels::col2im(r.data(), c, h, w, k, stride, pad, oh, ow, back.data());
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < col.size(); ++i) lhs += double(col[i]) * r[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += double(x[i]) * back[i];
  EXPECT_NEAR(lhs, rhs, 1e-4);
}

TEST(Gradients, Conv2d) {
  std::mt19937_64 rng(4);
  for (auto [stride, pad] : {std::pair{1, 2}, {2, 2}}) {
    ParameterSet ps;
    ps.add("conv.weight", {3, 2, 5, 5});
    ps.add("conv.bias", {3});
    Parameter& w = ps.get("conv.weight");
    Parameter& b = ps.get("conv.bias");
    fill_normal(w, rng);
    fill_normal(b, rng);
    Objective obj{[&, stride = stride, pad = pad](Tape&, Var x) { return ops::conv2d(x, w, b, stride, pad); }, {}};
    const Tensor x = random_tensor(Shape{2, 8, 8}, rng, -1, 1);
    obj.target = random_tensor(naive_conv(x, w, b, stride, pad).shape(), rng);
    check_gradients(obj, x, {&w, &b}, 1e-2, 1e-3);
  }
}

TEST(Gradients, ConvTranspose2d) {
  std::mt19937_64 rng(5);
  ParameterSet ps;
  ps.add("up.weight", {2, 3, 4, 4});
  ps.add("up.bias", {3});
  Parameter& w = ps.get("up.weight");
  Parameter& b = ps.get("up.bias");
  fill_normal(w, rng);
  fill_normal(b, rng);
  Objective obj{[&](Tape&, Var x) { return ops::conv_transpose2d(x, w, b, 2, 1); }, {}};
  const Tensor x = random_tensor(Shape{2, 5, 4}, rng, -1, 1);
  obj.target = random_tensor(Shape{3, 10, 8}, rng);
  check_gradients(obj, x, {&w, &b}, 1e-2, 1e-3);
}

class OpGradients : public ::testing::Test {
 protected:
  void SetUp() override {
    rng_.seed(6);
    fill_normal(ps_.add("w", {4, 2, 3, 3}), rng_);
    fill_normal(ps_.add("b", {4}), rng_);
    fill_normal(ps_.add("g.w", {1, 2, 3, 3}), rng_);
    fill_normal(ps_.add("g.b", {1}), rng_);
    x_ = random_tensor(Shape{2, 8, 8}, rng_, -1, 1);
  }
  Var features(Var x) { return ops::conv2d(x, ps_.get("w"), ps_.get("b"), 1, 1); }
  Var plane(Var x) { return ops::sigmoid(ops::conv2d(x, ps_.get("g.w"), ps_.get("g.b"), 1, 1)); }
  std::vector<Parameter*> all() {
    std::vector<Parameter*> out;
    for (auto& p : ps_.all()) out.push_back(&p);
    return out;
  }
  void check(std::function<Var(Var)> graph, Shape out) {
    Objective obj{[graph](Tape&, Var x) { return graph(x); }, random_tensor(out, rng_)};
    check_gradients(obj, x_, all(), 1e-3, 5e-3);
  }

  std::mt19937_64 rng_;
  ParameterSet ps_;
  Tensor x_;
};

TEST_F(OpGradients, Relu) { check([&](Var x) { return ops::relu(features(x)); }, {4, 8, 8}); }

TEST_F(OpGradients, Sigmoid) { check([&](Var x) { return plane(x); }, {1, 8, 8}); }

TEST_F(OpGradients, GateAndComplement) {
  check([&](Var x) { return ops::gate(features(x), plane(x)); }, {4, 8, 8});
  check([&](Var x) { return ops::gate(features(x), ops::one_minus(plane(x))); }, {4, 8, 8});
}

TEST_F(OpGradients, AddAndConcat) {
  check([&](Var x) { return ops::add(features(x), features(x)); }, {4, 8, 8});
  check([&](Var x) {
    const Var parts[] = {features(x), plane(x), x};
    return ops::concat(parts);
  }, {7, 8, 8});
}

TEST_F(OpGradients, Pooling) {
  check([&](Var x) { return ops::avg_pool(features(x), 2); }, {4, 4, 4});
  check([&](Var x) { return ops::max_pool2(features(x)); }, {4, 4, 4});
}

TEST(Ops, WeightedSumOfScalars) {
  Tape tape;
  const Var a = tape.variable(Tensor(Shape{1, 1, 1}, 2.0f));
  const Var b = tape.variable(Tensor(Shape{1, 1, 1}, 3.0f));
  const Var parts[] = {a, b};
  const float w[] = {0.5f, 4.0f};
  Var s = ops::weighted_sum(parts, w);
  EXPECT_FLOAT_EQ(s->value[0], 13.0f);
  tape.backward(s);
  EXPECT_FLOAT_EQ(a->grad[0], 0.5f);
  EXPECT_FLOAT_EQ(b->grad[0], 4.0f);
}

TEST(Ops, SigmoidStaysStrictlyInsideTheUnitInterval) {
  Tape tape(false);
  Tensor logits(Shape{1, 1, 4});
  logits[0] = -1e4f;
  logits[1] = -40.0f;
  logits[2] = 40.0f;
  logits[3] = 1e4f;
  const Tensor a = ops::sigmoid(tape.constant(logits))->value;
  for (float v : a.vec()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(Ops, FrozenParametersReceiveNoGradient) {
  std::mt19937_64 rng(7);
  ParameterSet ps;
  ps.add("w", {2, 1, 3, 3});
  ps.add("b", {2});
  Parameter& w = ps.get("w");
  Parameter& b = ps.get("b");
  fill_normal(w, rng);
  w.frozen = true;
  Tape tape;
  Var y = ops::conv2d(tape.constant(random_tensor(Shape{1, 4, 4}, rng)), w, b, 1, 1);
  tape.backward(ops::primary_loss(y, Tensor(Shape{2, 4, 4}, 1.0f)));
  for (float g : w.grad) EXPECT_EQ(g, 0.0f);
  double total = 0.0;
  for (float g : b.grad) total += std::abs(g);
  EXPECT_GT(total, 0.0);
}

TEST(Ops, NonRecordingTapeRejectsBackward) {
  Tape tape(false);
  Var s = tape.constant(Tensor(Shape{1, 1, 1}, 1.0f));
  EXPECT_THROW(tape.backward(s), std::logic_error);
}

TEST(ParameterSetTest, SubsetAssignAndFreeze) {
  ParameterSet ps;
  ps.add("attention.a", {2});
  ps.add("encoder.b", {3});
  ps.get("attention.a").value = {1.0f, 2.0f};
  ParameterSet sub = ps.subset("attention.");
  ASSERT_EQ(sub.size(), 1u);
  sub.get("attention.a").value = {5.0f, 6.0f};
  ps.assign_from(sub);
  EXPECT_EQ(ps.get("attention.a").value, (std::vector<float>{5.0f, 6.0f}));
  ps.set_frozen("attention.", true);
  EXPECT_TRUE(ps.get("attention.a").frozen);
  EXPECT_FALSE(ps.get("encoder.b").frozen);
  EXPECT_EQ(ps.total_numel(), 5u);
  EXPECT_THROW(ps.add("encoder.b", {1}), std::invalid_argument);
  ParameterSet wrong;
  wrong.add("attention.a", {3});
  EXPECT_THROW(ps.assign_from(wrong), std::invalid_argument);
}
