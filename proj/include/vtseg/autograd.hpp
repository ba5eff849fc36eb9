// vtseg/autograd.hpp
//
// Reverse-mode automatic differentiation on dense matrices. A Tape owns the
// forward values and per-node adjoints of one computation; operations append
// nodes and capture the indices they need for the backward sweep. Scalar type
// is a template parameter: training runs in float, finite-difference gradient
// checks run the identical code in double.
//
// Batch convention: several ops accept a rows_per_block argument so that a
// matrix holding B stacked samples (B*rows x cols) is treated as B independent
// blocks (attention never crosses block boundaries, spatial ops reshape each
// block separately).

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef VTSEG_AUTOGRAD_HPP
#define VTSEG_AUTOGRAD_HPP

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vtseg/common.hpp"

namespace vtseg::ag {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

// A named trainable (or frozen) weight array. Gradients are accumulated
// tape-locally and flushed into `grad` under single-writer discipline.
template <typename S>
struct Param {
  std::string name;
  Mat<S> value;
  Mat<S> grad;  // same shape as value once any gradient has been flushed
  bool trainable = true;

  void ensure_grad() {
    if (grad.size() == 0) grad = Mat<S>::Zero(value.rows(), value.cols());
  }
  void zero_grad() {
    if (grad.size() != 0) grad.setZero();
  }
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename S>
class Tape {
 public:
  Tape() { nodes_.reserve(256); }

  // ----- leaves -----

  Var input(Mat<S> v) { return push(std::move(v), /*needs_grad=*/false); }

  // Leaf that collects a gradient; used for loss bridging and grad checks.
  Var input_grad(Mat<S> v) { return push(std::move(v), /*needs_grad=*/true); }

  Var use(Param<S>& p) {
    auto it = param_vars_.find(&p);
    if (it != param_vars_.end()) return it->second;
    Var v = push(p.value, p.trainable);
    param_vars_.emplace(&p, v);
    param_order_.push_back(&p);
    return v;
  }

  const Mat<S>& val(Var v) const { return nodes_[v.id].value; }

  // Adjoint of a node after backward(); zero matrix if it was never reached.
  Mat<S> grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.size() == 0) return Mat<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // ----- arithmetic -----

  Var add(Var a, Var b) {
    shape_eq(a, b, "add");
    Var out = push(nodes_[a.id].value + nodes_[b.id].value, needs(a) || needs(b));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, b, out] {
        accum(a, nodes_[out.id].grad);
        accum(b, nodes_[out.id].grad);
      };
    return out;
  }

  Var sub(Var a, Var b) {
    shape_eq(a, b, "sub");
    Var out = push(nodes_[a.id].value - nodes_[b.id].value, needs(a) || needs(b));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, b, out] {
        accum(a, nodes_[out.id].grad);
        accum(b, -nodes_[out.id].grad);
      };
    return out;
  }

  Var cmul(Var a, Var b) {
    shape_eq(a, b, "cmul");
    Var out = push(nodes_[a.id].value.cwiseProduct(nodes_[b.id].value), needs(a) || needs(b));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, b, out] {
        accum(a, nodes_[out.id].grad.cwiseProduct(nodes_[b.id].value));
        accum(b, nodes_[out.id].grad.cwiseProduct(nodes_[a.id].value));
      };
    return out;
  }

  Var scale(Var a, S c) {
    Var out = push(nodes_[a.id].value * c, needs(a));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, c, out] { accum(a, nodes_[out.id].grad * c); };
    return out;
  }

  // Broadcast a 1 x D row vector over all rows of x.
  Var add_rowvec(Var x, Var r) {
    const Mat<S>& xv = nodes_[x.id].value;
    const Mat<S>& rv = nodes_[r.id].value;
    if (rv.rows() != 1 || rv.cols() != xv.cols())
      throw ShapeError("add_rowvec: row vector shape mismatch");
    Var out = push(xv.rowwise() + rv.row(0), needs(x) || needs(r));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, x, r, out] {
        accum(x, nodes_[out.id].grad);
        accum(r, nodes_[out.id].grad.colwise().sum());
      };
    return out;
  }

  Var matmul(Var a, Var b) {
    const Mat<S>& av = nodes_[a.id].value;
    const Mat<S>& bv = nodes_[b.id].value;
    if (av.cols() != bv.rows()) throw ShapeError("matmul: inner dimensions differ");
    Var out = push(av * bv, needs(a) || needs(b));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, b, out] {
        const Mat<S>& g = nodes_[out.id].grad;
        if (needs(a)) accum(a, g * nodes_[b.id].value.transpose());
        if (needs(b)) accum(b, nodes_[a.id].value.transpose() * g);
      };
    return out;
  }

  // a * b^T without materializing the transpose as a node.
  Var matmul_nt(Var a, Var b) {
    const Mat<S>& av = nodes_[a.id].value;
    const Mat<S>& bv = nodes_[b.id].value;
    if (av.cols() != bv.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
    Var out = push(av * bv.transpose(), needs(a) || needs(b));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, b, out] {
        const Mat<S>& g = nodes_[out.id].grad;
        if (needs(a)) accum(a, g * nodes_[b.id].value);
        if (needs(b)) accum(b, g.transpose() * nodes_[a.id].value);
      };
    return out;
  }

  // x*W + bias rows. bias must be 1 x K.
  Var linear(Var x, Var w, Var b) { return add_rowvec(matmul(x, w), b); }

  Var transpose(Var a) {
    Var out = push(nodes_[a.id].value.transpose(), needs(a));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, out] { accum(a, nodes_[out.id].grad.transpose()); };
    return out;
  }

  // ----- structure -----

  Var concat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) throw DomainError("concat_rows: empty list");
    Eigen::Index rows = 0, cols = nodes_[xs[0].id].value.cols();
    bool ng = false;
    for (Var v : xs) {
      if (nodes_[v.id].value.cols() != cols) throw ShapeError("concat_rows: column mismatch");
      rows += nodes_[v.id].value.rows();
      ng = ng || needs(v);
    }
    Mat<S> m(rows, cols);
    Eigen::Index r = 0;
    for (Var v : xs) {
      m.middleRows(r, nodes_[v.id].value.rows()) = nodes_[v.id].value;
      r += nodes_[v.id].value.rows();
    }
    Var out = push(std::move(m), ng);
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, xs, out] {
        Eigen::Index r = 0;
        for (Var v : xs) {
          Eigen::Index n = nodes_[v.id].value.rows();
          accum(v, nodes_[out.id].grad.middleRows(r, n));
          r += n;
        }
      };
    return out;
  }

  Var slice_rows(Var a, int r0, int n) {
    const Mat<S>& av = nodes_[a.id].value;
    if (r0 < 0 || n < 0 || r0 + n > av.rows()) throw ShapeError("slice_rows: out of range");
    Var out = push(av.middleRows(r0, n), needs(a));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, r0, n, out] {
        Node& an = nodes_[a.id];
        touch(an);
        an.grad.middleRows(r0, n) += nodes_[out.id].grad;
      };
    return out;
  }

  Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw DomainError("concat_cols: empty list");
    Eigen::Index cols = 0, rows = nodes_[xs[0].id].value.rows();
    bool ng = false;
    for (Var v : xs) {
      if (nodes_[v.id].value.rows() != rows) throw ShapeError("concat_cols: row mismatch");
      cols += nodes_[v.id].value.cols();
      ng = ng || needs(v);
    }
    Mat<S> m(rows, cols);
    Eigen::Index c = 0;
    for (Var v : xs) {
      m.middleCols(c, nodes_[v.id].value.cols()) = nodes_[v.id].value;
      c += nodes_[v.id].value.cols();
    }
    Var out = push(std::move(m), ng);
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, xs, out] {
        Eigen::Index c = 0;
        for (Var v : xs) {
          Eigen::Index n = nodes_[v.id].value.cols();
          accum(v, nodes_[out.id].grad.middleCols(c, n));
          c += n;
        }
      };
    return out;
  }

  Var slice_cols(Var a, int c0, int n) {
    const Mat<S>& av = nodes_[a.id].value;
    if (c0 < 0 || n < 0 || c0 + n > av.cols()) throw ShapeError("slice_cols: out of range");
    Var out = push(av.middleCols(c0, n), needs(a));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, c0, n, out] {
        Node& an = nodes_[a.id];
        touch(an);
        an.grad.middleCols(c0, n) += nodes_[out.id].grad;
      };
    return out;
  }

  // Select rows by index; duplicates allowed (backward scatter-adds).
  Var gather_rows(Var a, std::vector<int> idx) {
    const Mat<S>& av = nodes_[a.id].value;
    Mat<S> m(static_cast<Eigen::Index>(idx.size()), av.cols());
    for (size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= av.rows()) throw ShapeError("gather_rows: index out of range");
      m.row(static_cast<Eigen::Index>(i)) = av.row(idx[i]);
    }
    Var out = push(std::move(m), needs(a));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, idx = std::move(idx), out] {
        Node& an = nodes_[a.id];
        touch(an);
        for (size_t i = 0; i < idx.size(); ++i)
          an.grad.row(idx[i]) += nodes_[out.id].grad.row(static_cast<Eigen::Index>(i));
      };
    return out;
  }

  // Repeat a 1 x D row n times.
  Var broadcast_row(Var a, int n) {
    const Mat<S>& av = nodes_[a.id].value;
    if (av.rows() != 1) throw ShapeError("broadcast_row: input must have one row");
    Var out = push(av.replicate(n, 1), needs(a));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, out] { accum(a, nodes_[out.id].grad.colwise().sum()); };
    return out;
  }

  // ----- reductions -----

  Var mean_rows(Var a) {
    const Mat<S>& av = nodes_[a.id].value;
    Var out = push(Mat<S>(av.colwise().mean()), needs(a));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, out] {
        const Mat<S>& g = nodes_[out.id].grad;  // 1 x D
        S inv = S(1) / static_cast<S>(nodes_[a.id].value.rows());
        Node& an = nodes_[a.id];
        touch(an);
        an.grad.noalias() += Mat<S>::Ones(an.value.rows(), 1) * (g * inv);
      };
    return out;
  }

  // Mean over each block of rows_per_block rows; output is B x D.
  Var block_mean_rows(Var a, int rows_per_block) {
    const Mat<S>& av = nodes_[a.id].value;
    if (rows_per_block <= 0 || av.rows() % rows_per_block != 0)
      throw ShapeError("block_mean_rows: rows not divisible by block size");
    int b = static_cast<int>(av.rows()) / rows_per_block;
    Mat<S> m(b, av.cols());
    for (int i = 0; i < b; ++i)
      m.row(i) = av.middleRows(i * rows_per_block, rows_per_block).colwise().mean();
    Var out = push(std::move(m), needs(a));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, rows_per_block, b, out] {
        Node& an = nodes_[a.id];
        touch(an);
        S inv = S(1) / static_cast<S>(rows_per_block);
        for (int i = 0; i < b; ++i)
          an.grad.middleRows(i * rows_per_block, rows_per_block).rowwise() +=
              nodes_[out.id].grad.row(i) * inv;
      };
    return out;
  }

  Var mean_all(Var a) {
    const Mat<S>& av = nodes_[a.id].value;
    Mat<S> m(1, 1);
    m(0, 0) = av.mean();
    Var out = push(std::move(m), needs(a));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, out] {
        Node& an = nodes_[a.id];
        touch(an);
        an.grad.array() += nodes_[out.id].grad(0, 0) / static_cast<S>(an.value.size());
      };
    return out;
  }

  Var sum_all(Var a) {
    const Mat<S>& av = nodes_[a.id].value;
    Mat<S> m(1, 1);
    m(0, 0) = av.sum();
    Var out = push(std::move(m), needs(a));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, out] {
        Node& an = nodes_[a.id];
        touch(an);
        an.grad.array() += nodes_[out.id].grad(0, 0);
      };
    return out;
  }

  // ----- nonlinearities -----

  Var gelu(Var a) {
    const Mat<S>& x = nodes_[a.id].value;
    Mat<S> y = x.unaryExpr([](S v) {
      return static_cast<S>(0.5 * double(v) * (1.0 + std::erf(double(v) * M_SQRT1_2)));
    });
    Var out = push(std::move(y), needs(a));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, out] {
        const Mat<S>& x = nodes_[a.id].value;
        Mat<S> d = x.unaryExpr([](S v) {
          double xv = double(v);
          double phi = std::exp(-0.5 * xv * xv) / std::sqrt(2.0 * M_PI);
          double Phi = 0.5 * (1.0 + std::erf(xv * M_SQRT1_2));
          return static_cast<S>(Phi + xv * phi);
        });
        accum(a, nodes_[out.id].grad.cwiseProduct(d));
      };
    return out;
  }

  Var sigmoid(Var a) {
    Mat<S> y = nodes_[a.id].value.unaryExpr(
        [](S v) { return static_cast<S>(1.0 / (1.0 + std::exp(-double(v)))); });
    Var out = push(std::move(y), needs(a));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, out] {
        const Mat<S>& y = nodes_[out.id].value;
        accum(a, nodes_[out.id].grad.cwiseProduct(
                     y.cwiseProduct(Mat<S>::Ones(y.rows(), y.cols()) - y)));
      };
    return out;
  }

  Var softmax_rows(Var a) {
    const Mat<S>& x = nodes_[a.id].value;
    Mat<S> y(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      S mx = x.row(i).maxCoeff();
      Eigen::Array<S, 1, Eigen::Dynamic> e = (x.row(i).array() - mx).exp();
      y.row(i) = e / e.sum();
    }
    Var out = push(std::move(y), needs(a));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, a, out] {
        const Mat<S>& y = nodes_[out.id].value;
        const Mat<S>& g = nodes_[out.id].grad;
        Mat<S> d(y.rows(), y.cols());
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
          S dot = y.row(i).dot(g.row(i));
          d.row(i) = y.row(i).cwiseProduct(g.row(i) - Mat<S>::Constant(1, y.cols(), dot));
        }
        accum(a, d);
      };
    return out;
  }

  // Row-wise layer normalization with per-feature gain/bias (1 x D each).
  Var layer_norm(Var x, Var gain, Var bias, S eps) {
    const Mat<S>& xv = nodes_[x.id].value;
    const Mat<S>& gv = nodes_[gain.id].value;
    const Mat<S>& bv = nodes_[bias.id].value;
    if (gv.rows() != 1 || gv.cols() != xv.cols() || bv.rows() != 1 || bv.cols() != xv.cols())
      throw ShapeError("layer_norm: gain/bias must be 1 x D");
    Eigen::Index n = xv.rows(), d = xv.cols();
    Mat<S> xhat(n, d);
    Eigen::Array<S, Eigen::Dynamic, 1> istd(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      S mu = xv.row(i).mean();
      S var = (xv.row(i).array() - mu).square().mean();
      S is = S(1) / std::sqrt(var + eps);
      istd(i) = is;
      xhat.row(i) = (xv.row(i).array() - mu) * is;
    }
    Mat<S> y = (xhat.array().rowwise() * gv.row(0).array()).rowwise() + bv.row(0).array();
    Var out = push(std::move(y), needs(x) || needs(gain) || needs(bias));
    if (nodes_[out.id].needs_grad) {
      auto xhat_p = std::make_shared<Mat<S>>(std::move(xhat));
      auto istd_p = std::make_shared<Eigen::Array<S, Eigen::Dynamic, 1>>(std::move(istd));
      nodes_[out.id].back = [this, x, gain, bias, out, xhat_p, istd_p] {
        const Mat<S>& g = nodes_[out.id].grad;
        const Mat<S>& gv = nodes_[gain.id].value;
        if (needs(gain)) accum(gain, (g.array() * xhat_p->array()).colwise().sum().matrix());
        if (needs(bias)) accum(bias, g.colwise().sum());
        if (needs(x)) {
          Eigen::Index n = g.rows(), d = g.cols();
          Mat<S> dx(n, d);
          for (Eigen::Index i = 0; i < n; ++i) {
            Eigen::Array<S, 1, Eigen::Dynamic> gy = g.row(i).array() * gv.row(0).array();
            S m1 = gy.mean();
            S m2 = (gy * xhat_p->row(i).array()).mean();
            dx.row(i) = ((gy - m1 - xhat_p->row(i).array() * m2) * (*istd_p)(i)).matrix();
          }
          accum(x, dx);
        }
      };
    }
    return out;
  }

  Var l2_normalize_rows(Var x, S eps = S(1e-12)) {
    const Mat<S>& xv = nodes_[x.id].value;
    Eigen::Array<S, Eigen::Dynamic, 1> inv(xv.rows());
    Mat<S> y(xv.rows(), xv.cols());
    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
      S nrm = std::sqrt(xv.row(i).squaredNorm() + eps);
      inv(i) = S(1) / nrm;
      y.row(i) = xv.row(i) * inv(i);
    }
    Var out = push(std::move(y), needs(x));
    if (nodes_[out.id].needs_grad) {
      auto inv_p = std::make_shared<Eigen::Array<S, Eigen::Dynamic, 1>>(std::move(inv));
      nodes_[out.id].back = [this, x, out, inv_p] {
        const Mat<S>& y = nodes_[out.id].value;
        const Mat<S>& g = nodes_[out.id].grad;
        Mat<S> dx(y.rows(), y.cols());
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
          S dot = y.row(i).dot(g.row(i));
          dx.row(i) = (g.row(i) - y.row(i) * dot) * (*inv_p)(i);
        }
        accum(x, dx);
      };
    }
    return out;
  }

  // ----- attention -----

  // Multi-head scaled dot-product attention over stacked blocks.
  // q: (B*nq) x D, k and v: (B*nkv) x D. Softmax runs over each block's keys;
  // no information crosses block boundaries. Returns (B*nq) x D.
  Var attention(Var q, Var k, Var v, int heads, int nq, int nkv) {
    const Mat<S>& qv = nodes_[q.id].value;
    const Mat<S>& kv = nodes_[k.id].value;
    const Mat<S>& vv = nodes_[v.id].value;
    Eigen::Index d = qv.cols();
    if (kv.cols() != d || vv.cols() != d) throw ShapeError("attention: dim mismatch");
    if (heads <= 0 || d % heads != 0) throw ShapeError("attention: dim not divisible by heads");
    if (nq <= 0 || qv.rows() % nq != 0) throw ShapeError("attention: bad query block size");
    if (nkv <= 0 || kv.rows() % nkv != 0) throw ShapeError("attention: bad key block size");
    int b = static_cast<int>(qv.rows()) / nq;
    if (kv.rows() / nkv != b || kv.rows() != vv.rows())
      throw ShapeError("attention: query/key block count mismatch");
    Eigen::Index dh = d / heads;
    S scl = S(1) / std::sqrt(static_cast<S>(dh));

    auto probs = std::make_shared<std::vector<Mat<S>>>();
    probs->reserve(static_cast<size_t>(b) * heads);
    Mat<S> out_v(qv.rows(), d);
    for (int blk = 0; blk < b; ++blk) {
      for (int h = 0; h < heads; ++h) {
        auto Q = qv.block(blk * nq, h * dh, nq, dh);
        auto K = kv.block(blk * nkv, h * dh, nkv, dh);
        auto V = vv.block(blk * nkv, h * dh, nkv, dh);
        Mat<S> scores = Q * K.transpose() * scl;
        for (Eigen::Index i = 0; i < scores.rows(); ++i) {
          S mx = scores.row(i).maxCoeff();
          Eigen::Array<S, 1, Eigen::Dynamic> e = (scores.row(i).array() - mx).exp();
          scores.row(i) = (e / e.sum()).matrix();
        }
        out_v.block(blk * nq, h * dh, nq, dh).noalias() = scores * V;
        probs->push_back(std::move(scores));
      }
    }
    Var out = push(std::move(out_v), needs(q) || needs(k) || needs(v));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, q, k, v, heads, nq, nkv, b, dh, scl, probs, out] {
        const Mat<S>& qv = nodes_[q.id].value;
        const Mat<S>& kv = nodes_[k.id].value;
        const Mat<S>& vv = nodes_[v.id].value;
        const Mat<S>& g = nodes_[out.id].grad;
        Mat<S> dq = Mat<S>::Zero(qv.rows(), qv.cols());
        Mat<S> dk = Mat<S>::Zero(kv.rows(), kv.cols());
        Mat<S> dv = Mat<S>::Zero(vv.rows(), vv.cols());
        size_t pi = 0;
        for (int blk = 0; blk < b; ++blk) {
          for (int h = 0; h < heads; ++h, ++pi) {
            const Mat<S>& A = (*probs)[pi];
            auto Q = qv.block(blk * nq, h * dh, nq, dh);
            auto K = kv.block(blk * nkv, h * dh, nkv, dh);
            auto V = vv.block(blk * nkv, h * dh, nkv, dh);
            auto gO = g.block(blk * nq, h * dh, nq, dh);
            Mat<S> dA = gO * V.transpose();
            Mat<S> dScores(A.rows(), A.cols());
            for (Eigen::Index i = 0; i < A.rows(); ++i) {
              S dot = A.row(i).dot(dA.row(i));
              dScores.row(i) =
                  A.row(i).cwiseProduct(dA.row(i) - Mat<S>::Constant(1, A.cols(), dot));
            }
            dScores *= scl;
            dq.block(blk * nq, h * dh, nq, dh).noalias() += dScores * K;
            dk.block(blk * nkv, h * dh, nkv, dh).noalias() += dScores.transpose() * Q;
            dv.block(blk * nkv, h * dh, nkv, dh).noalias() += A.transpose() * gO;
          }
        }
        if (needs(q)) accum(q, dq);
        if (needs(k)) accum(k, dk);
        if (needs(v)) accum(v, dv);
      };
    return out;
  }

  // ----- spatial ops (x holds B stacked h*w pixel blocks, channels in cols) -----

  // 3x3 neighborhood unfold with zero padding: (B*h*w) x C -> (B*h*w) x 9C.
  // Column layout: tap index t in 0..8 (row-major over the 3x3 window) holds
  // channels [t*C, (t+1)*C).
  Var im2col3x3(Var x, int h, int w) {
    const Mat<S>& xv = nodes_[x.id].value;
    if (h <= 0 || w <= 0 || xv.rows() % (static_cast<Eigen::Index>(h) * w) != 0)
      throw ShapeError("im2col3x3: rows not divisible by h*w");
    int b = static_cast<int>(xv.rows() / (static_cast<Eigen::Index>(h) * w));
    Eigen::Index c = xv.cols();
    Mat<S> m = Mat<S>::Zero(xv.rows(), 9 * c);
    for (int blk = 0; blk < b; ++blk) {
      Eigen::Index base = static_cast<Eigen::Index>(blk) * h * w;
      for (int t = 0; t < 9; ++t) {
        int dr = t / 3 - 1, dc = t % 3 - 1;
        for (int r = 0; r < h; ++r) {
          int sr = r + dr;
          if (sr < 0 || sr >= h) continue;
          int c0 = std::max(0, -dc), c1 = std::min(w, w - dc);
          if (c0 >= c1) continue;
          m.block(base + static_cast<Eigen::Index>(r) * w + c0, t * c, c1 - c0, c) =
              xv.block(base + static_cast<Eigen::Index>(sr) * w + c0 + dc, 0, c1 - c0, c);
        }
      }
    }
    Var out = push(std::move(m), needs(x));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, x, h, w, b, c, out] {
        const Mat<S>& g = nodes_[out.id].grad;
        Node& xn = nodes_[x.id];
        touch(xn);
        for (int blk = 0; blk < b; ++blk) {
          Eigen::Index base = static_cast<Eigen::Index>(blk) * h * w;
          for (int t = 0; t < 9; ++t) {
            int dr = t / 3 - 1, dc = t % 3 - 1;
            for (int r = 0; r < h; ++r) {
              int sr = r + dr;
              if (sr < 0 || sr >= h) continue;
              int c0 = std::max(0, -dc), c1 = std::min(w, w - dc);
              if (c0 >= c1) continue;
              xn.grad.block(base + static_cast<Eigen::Index>(sr) * w + c0 + dc, 0, c1 - c0, c) +=
                  g.block(base + static_cast<Eigen::Index>(r) * w + c0, t * c, c1 - c0, c);
            }
          }
        }
      };
    return out;
  }

  // Bilinear resize of each h x w block to h2 x w2 (half-pixel centers,
  // clamped borders). Linear map, so backward is the exact adjoint.
  Var upsample_bilinear(Var x, int h, int w, int h2, int w2) {
    const Mat<S>& xv = nodes_[x.id].value;
    if (h <= 0 || w <= 0 || xv.rows() % (static_cast<Eigen::Index>(h) * w) != 0)
      throw ShapeError("upsample_bilinear: rows not divisible by h*w");
    int b = static_cast<int>(xv.rows() / (static_cast<Eigen::Index>(h) * w));
    Eigen::Index c = xv.cols();
    struct Tap {
      int r0, r1, c0, c1;
      S wr, wc;
    };
    auto taps = std::make_shared<std::vector<Tap>>();
    taps->resize(static_cast<size_t>(h2) * w2);
    for (int r = 0; r < h2; ++r) {
      double sr = (r + 0.5) * double(h) / h2 - 0.5;
      double fr = std::floor(sr);
      int r0 = std::clamp(int(fr), 0, h - 1), r1 = std::clamp(int(fr) + 1, 0, h - 1);
      S wr = static_cast<S>(sr - fr);
      if (sr < 0) wr = S(0);
      for (int cc = 0; cc < w2; ++cc) {
        double sc = (cc + 0.5) * double(w) / w2 - 0.5;
        double fc = std::floor(sc);
        int c0 = std::clamp(int(fc), 0, w - 1), c1 = std::clamp(int(fc) + 1, 0, w - 1);
        S wc = static_cast<S>(sc - fc);
        if (sc < 0) wc = S(0);
        (*taps)[static_cast<size_t>(r) * w2 + cc] = Tap{r0, r1, c0, c1, wr, wc};
      }
    }
    Mat<S> m(static_cast<Eigen::Index>(b) * h2 * w2, c);
    for (int blk = 0; blk < b; ++blk) {
      Eigen::Index ib = static_cast<Eigen::Index>(blk) * h * w;
      Eigen::Index ob = static_cast<Eigen::Index>(blk) * h2 * w2;
      for (int p = 0; p < h2 * w2; ++p) {
        const Tap& t = (*taps)[p];
        m.row(ob + p) = (S(1) - t.wr) * ((S(1) - t.wc) * xv.row(ib + t.r0 * w + t.c0) +
                                         t.wc * xv.row(ib + t.r0 * w + t.c1)) +
                        t.wr * ((S(1) - t.wc) * xv.row(ib + t.r1 * w + t.c0) +
                                t.wc * xv.row(ib + t.r1 * w + t.c1));
      }
    }
    Var out = push(std::move(m), needs(x));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, x, h, w, h2, w2, b, taps, out] {
        const Mat<S>& g = nodes_[out.id].grad;
        Node& xn = nodes_[x.id];
        touch(xn);
        for (int blk = 0; blk < b; ++blk) {
          Eigen::Index ib = static_cast<Eigen::Index>(blk) * h * w;
          Eigen::Index ob = static_cast<Eigen::Index>(blk) * h2 * w2;
          for (int p = 0; p < h2 * w2; ++p) {
            const Tap& t = (*taps)[p];
            const auto& gr = g.row(ob + p);
            xn.grad.row(ib + t.r0 * w + t.c0) += (S(1) - t.wr) * (S(1) - t.wc) * gr;
            xn.grad.row(ib + t.r0 * w + t.c1) += (S(1) - t.wr) * t.wc * gr;
            xn.grad.row(ib + t.r1 * w + t.c0) += t.wr * (S(1) - t.wc) * gr;
            xn.grad.row(ib + t.r1 * w + t.c1) += t.wr * t.wc * gr;
          }
        }
      };
    return out;
  }

  // 1-D strided unfold for temporal convolution: x is (B*t_in) x C,
  // output (B*t_out) x (k*C) with t_out = (t_in - k) / stride + 1.
  Var im2col1d(Var x, int t_in, int kernel, int stride) {
    const Mat<S>& xv = nodes_[x.id].value;
    if (t_in <= 0 || xv.rows() % t_in != 0) throw ShapeError("im2col1d: rows not divisible");
    if (kernel <= 0 || stride <= 0 || t_in < kernel) throw ShapeError("im2col1d: bad window");
    int b = static_cast<int>(xv.rows()) / t_in;
    int t_out = (t_in - kernel) / stride + 1;
    Eigen::Index c = xv.cols();
    Mat<S> m(static_cast<Eigen::Index>(b) * t_out, static_cast<Eigen::Index>(kernel) * c);
    for (int blk = 0; blk < b; ++blk) {
      Eigen::Index ib = static_cast<Eigen::Index>(blk) * t_in;
      Eigen::Index ob = static_cast<Eigen::Index>(blk) * t_out;
      for (int t = 0; t < t_out; ++t)
        for (int j = 0; j < kernel; ++j)
          m.block(ob + t, j * c, 1, c) = xv.block(ib + t * stride + j, 0, 1, c);
    }
    Var out = push(std::move(m), needs(x));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, x, t_in, kernel, stride, b, t_out, c, out] {
        const Mat<S>& g = nodes_[out.id].grad;
        Node& xn = nodes_[x.id];
        touch(xn);
        for (int blk = 0; blk < b; ++blk) {
          Eigen::Index ib = static_cast<Eigen::Index>(blk) * t_in;
          Eigen::Index ob = static_cast<Eigen::Index>(blk) * t_out;
          for (int t = 0; t < t_out; ++t)
            for (int j = 0; j < kernel; ++j)
              xn.grad.block(ib + t * stride + j, 0, 1, c) += g.block(ob + t, j * c, 1, c);
        }
      };
    return out;
  }

  // ----- losses -----

  // mean_i [ logsumexp(row_i) - logits(i,i) ] for square logits.
  Var cross_entropy_diag(Var logits) {
    const Mat<S>& z = nodes_[logits.id].value;
    if (z.rows() != z.cols()) throw ShapeError("cross_entropy_diag: logits must be square");
    if (z.rows() == 0) throw DomainError("cross_entropy_diag: empty batch");
    Eigen::Index n = z.rows();
    S total = S(0);
    for (Eigen::Index i = 0; i < n; ++i) {
      S mx = z.row(i).maxCoeff();
      S lse = mx + std::log((z.row(i).array() - mx).exp().sum());
      total += lse - z(i, i);
    }
    Mat<S> m(1, 1);
    m(0, 0) = total / static_cast<S>(n);
    Var out = push(std::move(m), needs(logits));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, logits, out] {
        const Mat<S>& z = nodes_[logits.id].value;
        Eigen::Index n = z.rows();
        S g = nodes_[out.id].grad(0, 0) / static_cast<S>(n);
        Mat<S> d(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
          S mx = z.row(i).maxCoeff();
          Eigen::Array<S, 1, Eigen::Dynamic> e = (z.row(i).array() - mx).exp();
          d.row(i) = (e / e.sum()).matrix() * g;
          d(i, i) -= g;
        }
        accum(logits, d);
      };
    return out;
  }

  // Binary cross entropy with logits, averaged over every element.
  Var bce_with_logits_mean(Var logits, Var targets) {
    shape_eq(logits, targets, "bce_with_logits_mean");
    const Mat<S>& z = nodes_[logits.id].value;
    const Mat<S>& t = nodes_[targets.id].value;
    // max(z,0) - z*t + log(1+exp(-|z|)) is the stable form.
    S total = S(0);
    for (Eigen::Index j = 0; j < z.cols(); ++j)
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        double zz = double(z(i, j));
        total += static_cast<S>(std::max(zz, 0.0) - zz * double(t(i, j)) +
                                std::log1p(std::exp(-std::abs(zz))));
      }
    Mat<S> m(1, 1);
    m(0, 0) = total / static_cast<S>(z.size());
    Var out = push(std::move(m), needs(logits));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, logits, targets, out] {
        const Mat<S>& z = nodes_[logits.id].value;
        const Mat<S>& t = nodes_[targets.id].value;
        S g = nodes_[out.id].grad(0, 0) / static_cast<S>(z.size());
        Mat<S> d = z.unaryExpr([](S v) {
          return static_cast<S>(1.0 / (1.0 + std::exp(-double(v))));
        }) - t;
        accum(logits, d * g);
      };
    return out;
  }

  // Soft Dice loss per column (channel), averaged over columns:
  //   1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps),  p = sigmoid(logits).
  Var dice_loss_cols(Var logits, Var targets, S eps) {
    shape_eq(logits, targets, "dice_loss_cols");
    const Mat<S>& z = nodes_[logits.id].value;
    const Mat<S>& t = nodes_[targets.id].value;
    Eigen::Index nc = z.cols();
    Mat<S> p = z.unaryExpr([](S v) { return static_cast<S>(1.0 / (1.0 + std::exp(-double(v)))); });
    auto p_keep = std::make_shared<Mat<S>>(std::move(p));
    S total = S(0);
    std::vector<S> inter(nc), denom(nc);
    for (Eigen::Index j = 0; j < nc; ++j) {
      inter[j] = p_keep->col(j).dot(t.col(j));
      denom[j] = p_keep->col(j).sum() + t.col(j).sum() + eps;
      total += S(1) - (S(2) * inter[j] + eps) / denom[j];
    }
    Mat<S> m(1, 1);
    m(0, 0) = total / static_cast<S>(nc);
    Var out = push(std::move(m), needs(logits));
    if (nodes_[out.id].needs_grad)
      nodes_[out.id].back = [this, logits, targets, out, p_keep, inter, denom, eps, nc] {
        const Mat<S>& t = nodes_[targets.id].value;
        S g = nodes_[out.id].grad(0, 0) / static_cast<S>(nc);
        Mat<S> d(p_keep->rows(), p_keep->cols());
        for (Eigen::Index j = 0; j < nc; ++j) {
          // d/dp of -(2I+eps)/D with I = sum(p*g), D = sum(p)+sum(g)+eps.
          S num = S(2) * inter[j] + eps;
          for (Eigen::Index i = 0; i < d.rows(); ++i) {
            S dp = -(S(2) * t(i, j) * denom[j] - num) / (denom[j] * denom[j]);
            S ps = (*p_keep)(i, j);
            d(i, j) = dp * ps * (S(1) - ps) * g;
          }
        }
        accum(logits, d);
      };
    return out;
  }

  // ----- execution -----

  void backward(Var loss) {
    const Mat<S>& lv = nodes_[loss.id].value;
    if (lv.rows() != 1 || lv.cols() != 1) throw ContractError("backward: loss must be 1x1");
    backward_seeded({{loss, Mat<S>::Ones(1, 1)}});
  }

  void backward_seeded(const std::vector<std::pair<Var, Mat<S>>>& seeds) {
    for (const auto& [v, seed] : seeds) {
      Node& n = nodes_[v.id];
      if (seed.rows() != n.value.rows() || seed.cols() != n.value.cols())
        throw ShapeError("backward_seeded: seed shape mismatch");
      touch(n);
      n.grad += seed;
    }
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.size() != 0 && n.back) n.back();
    }
  }

  // Move accumulated parameter gradients into Param::grad. Call from a single
  // thread, in a fixed order across tapes, to keep reductions deterministic.
  void flush_param_grads() {
    for (Param<S>* p : param_order_) {
      Node& n = nodes_[param_vars_[p].id];
      if (n.grad.size() == 0) continue;
      p->ensure_grad();
      p->grad += n.grad;
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    std::function<void()> back;
    bool needs_grad = false;
  };

  Var push(Mat<S> v, bool needs_grad) {
    nodes_.push_back(Node{std::move(v), {}, {}, needs_grad});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  bool needs(Var v) const { return nodes_[v.id].needs_grad; }

  void touch(Node& n) {
    if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
  }

  template <typename Expr>
  void accum(Var v, const Expr& e) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    touch(n);
    n.grad += e;
  }

  void shape_eq(Var a, Var b, const char* op) {
    const Mat<S>& av = nodes_[a.id].value;
    const Mat<S>& bv = nodes_[b.id].value;
    if (av.rows() != bv.rows() || av.cols() != bv.cols())
      throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(av.rows()) + "x" +
                       std::to_string(av.cols()) + " vs " + std::to_string(bv.rows()) + "x" +
                       std::to_string(bv.cols()) + ")");
  }

  std::vector<Node> nodes_;
  std::unordered_map<Param<S>*, Var> param_vars_;
  std::vector<Param<S>*> param_order_;
};

}  // namespace vtseg::ag

#endif  // VTSEG_AUTOGRAD_HPP
