#pragma once

// Define-by-run reverse-mode autodiff on dense tensors. A Tape records one
// forward pass; node ids are already a topological order, so backward is a
// reverse sweep. Tapes are single-threaded; individual ops may fan work out
// over deterministic fixed blocks internally.

#include <array>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ncd/errors.hpp"
#include "ncd/gemm.hpp"
#include "ncd/parallel.hpp"
#include "ncd/rng.hpp"
#include "ncd/tensor.hpp"

namespace ncd {

enum class OpKind {
    Leaf,
    Conv2d,
    Affine,
    Relu,
    AvgPool,
    GlobalAvgPool,
    Dropout,
    Sigmoid,
    BceWithLogits,
    Add,
    Sub,
    ScalarMul,
    Mul,
    Sum,
    Mean,
    GatherRows,
    ConcatRows,
    Reshape,
    DecentralizeRows,
};

template <typename S>
class Tape;

template <typename S>
struct Var {
    Tape<S>* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

using Varf = Var<float>;

template <typename S>
class Tape {
public:
    struct Node {
        OpKind kind;
        std::vector<int> inputs;
        Tensor<S> value;
        std::vector<S> grad;  // empty until touched by backward
        bool needs_grad = false;
        std::function<void(Tape&, Node&)> backward;  // empty for leaves
    };

    Var<S> leaf(Tensor<S> value, bool requires_grad = false) {
        value.require_finite("Tape::leaf");
        Node n;
        n.kind = OpKind::Leaf;
        n.value = std::move(value);
        n.needs_grad = requires_grad;
        return push(std::move(n));
    }

    const Tensor<S>& value(Var<S> v) const { return node(v).value; }
    const std::vector<int>& shape(Var<S> v) const { return node(v).value.shape(); }

    bool needs_grad(Var<S> v) const { return node(v).needs_grad; }

    // Gradient of a leaf (or any node) after backward(); zeros if the loss
    // never reached it.
    Tensor<S> grad(Var<S> v) const {
        const Node& n = node(v);
        if (n.grad.empty()) return Tensor<S>::zeros(n.value.shape());
        return Tensor<S>(n.value.shape(), n.grad);
    }

    void backward(Var<S> loss) {
        Node& root = node(loss);
        if (root.value.size() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got " +
                                        root.value.shape_str());
        // Mark the subgraph that actually feeds the loss.
        std::vector<char> reach(nodes_.size(), 0);
        reach[size_t(loss.id)] = 1;
        for (int i = loss.id; i >= 0; --i) {
            if (!reach[size_t(i)]) continue;
            for (int in : nodes_[size_t(i)].inputs) reach[size_t(in)] = 1;
        }
        touch_grad(nodes_[size_t(loss.id)]);
        nodes_[size_t(loss.id)].grad[0] = S(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[size_t(i)];
            if (!reach[size_t(i)] || !n.needs_grad || n.grad.empty()) continue;
            if (n.backward) n.backward(*this, n);
        }
    }

    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }
    OpKind kind(Var<S> v) const { return node(v).kind; }

    // --- used by op implementations ---
    Var<S> push(Node n) {
        nodes_.push_back(std::move(n));
        return Var<S>{this, int(nodes_.size()) - 1};
    }
    Node& node(Var<S> v) {
        if (v.tape != this) throw std::invalid_argument("Var belongs to another tape");
        return nodes_.at(size_t(v.id));
    }
    const Node& node(Var<S> v) const {
        if (v.tape != this) throw std::invalid_argument("Var belongs to another tape");
        return nodes_.at(size_t(v.id));
    }
    Node& node_at(int id) { return nodes_.at(size_t(id)); }

    static void touch_grad(Node& n) {
        if (n.grad.empty()) n.grad.assign(n.value.size(), S(0));
    }
    // Accumulate into input node's grad.
    void add_grad(int id, const std::vector<S>& g) {
        Node& n = nodes_.at(size_t(id));
        if (!n.needs_grad) return;
        touch_grad(n);
        for (size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }

private:
    std::vector<Node> nodes_;
};

namespace detail {

template <typename S>
bool any_needs_grad(std::initializer_list<Var<S>> vars) {
    for (Var<S> v : vars)
        if (v.tape->needs_grad(v)) return true;
    return false;
}

inline constexpr size_t kParallelCutoff = 1u << 16;
inline constexpr long kImageBlock = 16;  // images per conv block; fixed so the
                                         // gradient fold order never depends on
                                         // the thread count

template <typename S>
void im2col(const S* img, int cin, int h, int w, int kh, int kw, int stride, int pad, int oh,
            int ow, S* col) {
    // col is [cin*kh*kw x oh*ow], row index = (ic*kh + dy)*kw + dx.
    const int p = oh * ow;
    for (int ic = 0; ic < cin; ++ic) {
        const S* chan = img + size_t(ic) * h * w;
        for (int dy = 0; dy < kh; ++dy) {
            for (int dx = 0; dx < kw; ++dx) {
                S* dst = col + size_t((ic * kh + dy) * kw + dx) * p;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride + dy - pad;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < ow; ++ox) dst[oy * ow + ox] = S(0);
                        continue;
                    }
                    const S* src_row = chan + size_t(iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride + dx - pad;
                        dst[oy * ow + ox] = (ix >= 0 && ix < w) ? src_row[ix] : S(0);
                    }
                }
            }
        }
    }
}

template <typename S>
void col2im_add(const S* col, int cin, int h, int w, int kh, int kw, int stride, int pad, int oh,
                int ow, S* img) {
    const int p = oh * ow;
    for (int ic = 0; ic < cin; ++ic) {
        S* chan = img + size_t(ic) * h * w;
        for (int dy = 0; dy < kh; ++dy) {
            for (int dx = 0; dx < kw; ++dx) {
                const S* src = col + size_t((ic * kh + dy) * kw + dx) * p;
                for (int oy = 0; oy < oh; ++oy) {
                    int iy = oy * stride + dy - pad;
                    if (iy < 0 || iy >= h) continue;
                    S* dst_row = chan + size_t(iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        int ix = ox * stride + dx - pad;
                        if (ix >= 0 && ix < w) dst_row[ix] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, NCHW input, [Cout,Cin,kh,kw] kernel.

template <typename S>
Var<S> conv2d(Var<S> input, Var<S> kernel, Var<S> bias, int stride, int padding) {
    Tape<S>& tape = *input.tape;
    const Tensor<S>& x = tape.value(input);
    const Tensor<S>& k = tape.value(kernel);
    const Tensor<S>& b = tape.value(bias);
    if (x.ndim() != 4 || k.ndim() != 4)
        throw std::invalid_argument("conv2d: expected 4-d input and kernel, got " +
                                    x.shape_str() + " and " + k.shape_str());
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    if (k.dim(1) != cin)
        throw std::invalid_argument("conv2d: input channels " + std::to_string(cin) +
                                    " != kernel channels " + std::to_string(k.dim(1)));
    if (b.ndim() != 1 || b.dim(0) != cout)
        throw std::invalid_argument("conv2d: bias shape " + b.shape_str() + " != [" +
                                    std::to_string(cout) + "]");
    if (stride < 1 || padding < 0) throw ConfigError("conv2d: stride must be >=1, padding >=0");
    const int hs = h + 2 * padding - kh;
    const int ws = w + 2 * padding - kw;
    if (hs < 0 || ws < 0 || hs % stride != 0 || ws % stride != 0)
        throw ConfigError("conv2d: output extent (" + std::to_string(h) + "+2*" +
                          std::to_string(padding) + "-" + std::to_string(kh) + ")/" +
                          std::to_string(stride) + " is not a positive integer");
    const int oh = hs / stride + 1, ow = ws / stride + 1;
    const int kdim = cin * kh * kw, p = oh * ow;

    Tensor<S> out({n, cout, oh, ow});
    const int nblocks = int((n + detail::kImageBlock - 1) / detail::kImageBlock);
    parallel_blocks(nblocks, [&](int blk) {
        auto [lo, hi] = block_range(n, nblocks, blk);
        std::vector<S> col(size_t(kdim) * p);
        for (long i = lo; i < hi; ++i) {
            detail::im2col(x.data() + size_t(i) * cin * h * w, cin, h, w, kh, kw, stride, padding,
                           oh, ow, col.data());
            S* o = out.data() + size_t(i) * cout * p;
            for (int oc = 0; oc < cout; ++oc)
                for (int q = 0; q < p; ++q) o[size_t(oc) * p + q] = b[size_t(oc)];
            detail::gemm_nn(o, k.data(), col.data(), cout, kdim, p);
        }
    });

    typename Tape<S>::Node nd;
    nd.kind = OpKind::Conv2d;
    nd.inputs = {input.id, kernel.id, bias.id};
    nd.value = std::move(out);
    nd.needs_grad = detail::any_needs_grad<S>({input, kernel, bias});
    nd.backward = [stride, padding, n, cin, h, w, cout, kh, kw, oh, ow, kdim, p](
                      Tape<S>& t, typename Tape<S>::Node& self) {
        const S* dout = self.grad.data();
        auto& in_node = t.node_at(self.inputs[0]);
        auto& k_node = t.node_at(self.inputs[1]);
        auto& b_node = t.node_at(self.inputs[2]);
        const bool want_dinput = in_node.needs_grad;
        const bool want_dkernel = k_node.needs_grad;
        const bool want_dbias = b_node.needs_grad;
        if (want_dinput) Tape<S>::touch_grad(in_node);
        if (want_dkernel) Tape<S>::touch_grad(k_node);
        if (want_dbias) Tape<S>::touch_grad(b_node);

        const int nblocks = int((n + detail::kImageBlock - 1) / detail::kImageBlock);
        // Per-block partials for the reduced gradients; folded serially below
        // so the float sum order is independent of the thread count.
        std::vector<std::vector<S>> dk_part, db_part;
        if (want_dkernel) dk_part.assign(size_t(nblocks), {});
        if (want_dbias) db_part.assign(size_t(nblocks), {});

        parallel_blocks(nblocks, [&](int blk) {
            auto [lo, hi] = block_range(n, nblocks, blk);
            std::vector<S> col(size_t(kdim) * p);
            std::vector<S> dcol;
            if (want_dinput) dcol.resize(size_t(kdim) * p);
            S* dk = nullptr;
            S* db = nullptr;
            if (want_dkernel) {
                dk_part[size_t(blk)].assign(size_t(cout) * kdim, S(0));
                dk = dk_part[size_t(blk)].data();
            }
            if (want_dbias) {
                db_part[size_t(blk)].assign(size_t(cout), S(0));
                db = db_part[size_t(blk)].data();
            }
            for (long i = lo; i < hi; ++i) {
                const S* dout_i = dout + size_t(i) * cout * p;
                if (want_dkernel)
                    detail::im2col(t.node_at(self.inputs[0]).value.data() + size_t(i) * cin * h * w,
                                   cin, h, w, kh, kw, stride, padding, oh, ow, col.data());
                if (want_dkernel) detail::gemm_nt(dk, dout_i, col.data(), cout, kdim, p);
                if (want_dbias)
                    for (int oc = 0; oc < cout; ++oc)
                        db[oc] += detail::sum_lanes(dout_i + size_t(oc) * p, size_t(p));
                if (want_dinput) {
                    std::fill(dcol.begin(), dcol.end(), S(0));
                    detail::gemm_tn(dcol.data(), t.node_at(self.inputs[1]).value.data(), dout_i,
                                    cout, kdim, p);
                    detail::col2im_add(dcol.data(), cin, h, w, kh, kw, stride, padding, oh, ow,
                                       t.node_at(self.inputs[0]).grad.data() +
                                           size_t(i) * cin * h * w);
                }
            }
        });
        if (want_dkernel)
            for (int blk = 0; blk < nblocks; ++blk)
                for (size_t j = 0; j < k_node.grad.size(); ++j)
                    k_node.grad[j] += dk_part[size_t(blk)][j];
        if (want_dbias)
            for (int blk = 0; blk < nblocks; ++blk)
                for (size_t j = 0; j < b_node.grad.size(); ++j)
                    b_node.grad[j] += db_part[size_t(blk)][j];
    };
    return tape.push(std::move(nd));
}

// ---------------------------------------------------------------------------
// affine: input[N,D] * weight[D,M] + bias[M] broadcast over rows.

template <typename S>
Var<S> affine(Var<S> input, Var<S> weight, Var<S> bias) {
    Tape<S>& tape = *input.tape;
    const Tensor<S>& x = tape.value(input);
    const Tensor<S>& wt = tape.value(weight);
    const Tensor<S>& b = tape.value(bias);
    if (x.ndim() != 2 || wt.ndim() != 2 || x.dim(1) != wt.dim(0))
        throw std::invalid_argument("affine: inner dimensions disagree, " + x.shape_str() + " * " +
                                    wt.shape_str());
    const int n = x.dim(0), d = x.dim(1), m = wt.dim(1);
    if (b.ndim() != 1 || b.dim(0) != m)
        throw std::invalid_argument("affine: bias shape " + b.shape_str() + " != [" +
                                    std::to_string(m) + "]");
    Tensor<S> out({n, m});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out.at2(i, j) = b[size_t(j)];
    detail::gemm_nn(out.data(), x.data(), wt.data(), n, d, m);

    typename Tape<S>::Node nd;
    nd.kind = OpKind::Affine;
    nd.inputs = {input.id, weight.id, bias.id};
    nd.value = std::move(out);
    nd.needs_grad = detail::any_needs_grad<S>({input, weight, bias});
    nd.backward = [n, d, m](Tape<S>& t, typename Tape<S>::Node& self) {
        const S* g = self.grad.data();
        auto& in_node = t.node_at(self.inputs[0]);
        auto& w_node = t.node_at(self.inputs[1]);
        auto& b_node = t.node_at(self.inputs[2]);
        if (in_node.needs_grad) {
            Tape<S>::touch_grad(in_node);
            detail::gemm_nt(in_node.grad.data(), g, w_node.value.data(), n, d, m);
        }
        if (w_node.needs_grad) {
            Tape<S>::touch_grad(w_node);
            detail::gemm_tn(w_node.grad.data(), in_node.value.data(), g, n, d, m);
        }
        if (b_node.needs_grad) {
            Tape<S>::touch_grad(b_node);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) b_node.grad[size_t(j)] += g[size_t(i) * m + j];
        }
    };
    return tape.push(std::move(nd));
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops.

template <typename S>
Var<S> relu(Var<S> input) {
    Tape<S>& tape = *input.tape;
    const Tensor<S>& x = tape.value(input);
    Tensor<S> out(x.shape());
    const size_t total = x.size();
    if (total >= detail::kParallelCutoff) {
        const int nblocks = int((total + detail::kParallelCutoff - 1) / detail::kParallelCutoff);
        parallel_blocks(nblocks, [&](int blk) {
            auto [lo, hi] = block_range(long(total), nblocks, blk);
            for (long i = lo; i < hi; ++i)
                out[size_t(i)] = x[size_t(i)] > S(0) ? x[size_t(i)] : S(0);
        });
    } else {
        for (size_t i = 0; i < total; ++i) out[i] = x[i] > S(0) ? x[i] : S(0);
    }
    typename Tape<S>::Node nd;
    nd.kind = OpKind::Relu;
    nd.inputs = {input.id};
    nd.value = std::move(out);
    nd.needs_grad = tape.needs_grad(input);
    nd.backward = [](Tape<S>& t, typename Tape<S>::Node& self) {
        auto& in_node = t.node_at(self.inputs[0]);
        if (!in_node.needs_grad) return;
        Tape<S>::touch_grad(in_node);
        const size_t total = self.grad.size();
        const int nblocks =
            total >= detail::kParallelCutoff
                ? int((total + detail::kParallelCutoff - 1) / detail::kParallelCutoff)
                : 1;
        parallel_blocks(nblocks, [&](int blk) {
            auto [lo, hi] = block_range(long(total), nblocks, blk);
            for (long i = lo; i < hi; ++i)
                if (in_node.value[size_t(i)] > S(0)) in_node.grad[size_t(i)] += self.grad[size_t(i)];
        });
    };
    return tape.push(std::move(nd));
}

template <typename S>
Var<S> avg_pool2d(Var<S> input, int window) {
    Tape<S>& tape = *input.tape;
    const Tensor<S>& x = tape.value(input);
    if (x.ndim() != 4) throw std::invalid_argument("avg_pool2d: expected 4-d input");
    if (window < 1) throw ConfigError("avg_pool2d: window must be >= 1");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % window != 0 || w % window != 0)
        throw ConfigError("avg_pool2d: extent " + std::to_string(h) + "x" + std::to_string(w) +
                          " not divisible by window " + std::to_string(window));
    const int oh = h / window, ow = w / window;
    const S inv = S(1) / S(window * window);
    Tensor<S> out({n, c, oh, ow});
    const long planes = long(n) * c;
    const int nblocks = int((planes + 63) / 64);
    parallel_blocks(nblocks, [&](int blk) {
        auto [lo, hi] = block_range(planes, nblocks, blk);
        for (long pl = lo; pl < hi; ++pl) {
            const S* src = x.data() + size_t(pl) * h * w;
            S* dst = out.data() + size_t(pl) * oh * ow;
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    S acc = S(0);
                    for (int dy = 0; dy < window; ++dy)
                        for (int dx = 0; dx < window; ++dx)
                            acc += src[size_t(oy * window + dy) * w + ox * window + dx];
                    dst[size_t(oy) * ow + ox] = acc * inv;
                }
        }
    });
    typename Tape<S>::Node nd;
    nd.kind = OpKind::AvgPool;
    nd.inputs = {input.id};
    nd.value = std::move(out);
    nd.needs_grad = tape.needs_grad(input);
    nd.backward = [window, h, w, oh, ow, planes, inv](Tape<S>& t, typename Tape<S>::Node& self) {
        auto& in_node = t.node_at(self.inputs[0]);
        if (!in_node.needs_grad) return;
        Tape<S>::touch_grad(in_node);
        const int nblocks = int((planes + 63) / 64);
        parallel_blocks(nblocks, [&](int blk) {
            auto [lo, hi] = block_range(planes, nblocks, blk);
            for (long pl = lo; pl < hi; ++pl) {
                const S* g = self.grad.data() + size_t(pl) * oh * ow;
                S* dst = in_node.grad.data() + size_t(pl) * h * w;
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        S v = g[size_t(oy) * ow + ox] * inv;
                        for (int dy = 0; dy < window; ++dy)
                            for (int dx = 0; dx < window; ++dx)
                                dst[size_t(oy * window + dy) * w + ox * window + dx] += v;
                    }
            }
        });
    };
    return tape.push(std::move(nd));
}

// [N,C,H,W] -> [N,C] spatial mean.
template <typename S>
Var<S> global_avg_pool(Var<S> input) {
    Tape<S>& tape = *input.tape;
    const Tensor<S>& x = tape.value(input);
    if (x.ndim() != 4) throw std::invalid_argument("global_avg_pool: expected 4-d input");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const S inv = S(1) / S(h * w);
    Tensor<S> out({n, c});
    const long planes = long(n) * c;
    for (long pl = 0; pl < planes; ++pl)
        out[size_t(pl)] = detail::sum_lanes(x.data() + size_t(pl) * h * w, size_t(h) * w) * inv;
    typename Tape<S>::Node nd;
    nd.kind = OpKind::GlobalAvgPool;
    nd.inputs = {input.id};
    nd.value = std::move(out);
    nd.needs_grad = tape.needs_grad(input);
    nd.backward = [h, w, planes, inv](Tape<S>& t, typename Tape<S>::Node& self) {
        auto& in_node = t.node_at(self.inputs[0]);
        if (!in_node.needs_grad) return;
        Tape<S>::touch_grad(in_node);
        for (long pl = 0; pl < planes; ++pl) {
            S v = self.grad[size_t(pl)] * inv;
            S* dst = in_node.grad.data() + size_t(pl) * h * w;
            for (int i = 0; i < h * w; ++i) dst[i] += v;
        }
    };
    return tape.push(std::move(nd));
}

// Inverted dropout: scales survivors by 1/(1-rate) so eval needs no rescale.
// training=false or rate=0 is the identity and records nothing.
template <typename S>
Var<S> dropout(Var<S> input, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigError("dropout: rate must be in [0,1), got " + std::to_string(rate));
    if (!training || rate == 0.0) return input;
    Tape<S>& tape = *input.tape;
    const Tensor<S>& x = tape.value(input);
    const S keep_scale = S(1.0 / (1.0 - rate));
    std::vector<S> mult(x.size());
    for (size_t i = 0; i < mult.size(); ++i) mult[i] = rng.bernoulli(rate) ? S(0) : keep_scale;
    Tensor<S> out(x.shape());
    for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * mult[i];
    typename Tape<S>::Node nd;
    nd.kind = OpKind::Dropout;
    nd.inputs = {input.id};
    nd.value = std::move(out);
    nd.needs_grad = tape.needs_grad(input);
    nd.backward = [mult = std::move(mult)](Tape<S>& t, typename Tape<S>::Node& self) {
        auto& in_node = t.node_at(self.inputs[0]);
        if (!in_node.needs_grad) return;
        Tape<S>::touch_grad(in_node);
        for (size_t i = 0; i < mult.size(); ++i) in_node.grad[i] += self.grad[i] * mult[i];
    };
    return tape.push(std::move(nd));
}

namespace detail {
// Saturates instead of overflowing; exact 0/1 in the far tails.
template <typename S>
S stable_sigmoid(S x) {
    if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
    S e = std::exp(x);
    return e / (S(1) + e);
}
}  // namespace detail

template <typename S>
Var<S> sigmoid(Var<S> input) {
    Tape<S>& tape = *input.tape;
    const Tensor<S>& x = tape.value(input);
    Tensor<S> out(x.shape());
    for (size_t i = 0; i < x.size(); ++i) out[i] = detail::stable_sigmoid(x[i]);
    typename Tape<S>::Node nd;
    nd.kind = OpKind::Sigmoid;
    nd.inputs = {input.id};
    nd.value = std::move(out);
    nd.needs_grad = tape.needs_grad(input);
    nd.backward = [](Tape<S>& t, typename Tape<S>::Node& self) {
        auto& in_node = t.node_at(self.inputs[0]);
        if (!in_node.needs_grad) return;
        Tape<S>::touch_grad(in_node);
        for (size_t i = 0; i < self.grad.size(); ++i) {
            S y = self.value[i];
            in_node.grad[i] += self.grad[i] * y * (S(1) - y);
        }
    };
    return tape.push(std::move(nd));
}

// Fused binary cross entropy with logits: per row, sum over columns of
// max(z,0) - z*y + log1p(exp(-|z|)); mean over rows. Targets must be 0/1 and
// receive no gradient.
template <typename S>
Var<S> bce_with_logits(Var<S> logits, Var<S> targets) {
    Tape<S>& tape = *logits.tape;
    const Tensor<S>& z = tape.value(logits);
    const Tensor<S>& y = tape.value(targets);
    if (z.ndim() != 2 || !z.same_shape(y))
        throw std::invalid_argument("bce_with_logits: logits " + z.shape_str() + " vs targets " +
                                    y.shape_str());
    for (size_t i = 0; i < y.size(); ++i)
        if (y[i] != S(0) && y[i] != S(1))
            throw ConfigError("bce_with_logits: target not in {0,1}: " + std::to_string(double(y[i])));
    const int rows = z.dim(0);
    const S inv_rows = S(1) / S(rows);
    S total = S(0);
    for (size_t i = 0; i < z.size(); ++i) {
        S zi = z[i];
        S term = (zi > S(0) ? zi : S(0)) - zi * y[i] + std::log1p(std::exp(-std::abs(zi)));
        total += term;
    }
    Tensor<S> out({1}, {total * inv_rows});
    typename Tape<S>::Node nd;
    nd.kind = OpKind::BceWithLogits;
    nd.inputs = {logits.id, targets.id};
    nd.value = std::move(out);
    nd.needs_grad = tape.needs_grad(logits);
    nd.backward = [inv_rows](Tape<S>& t, typename Tape<S>::Node& self) {
        auto& z_node = t.node_at(self.inputs[0]);
        const auto& y_node = t.node_at(self.inputs[1]);
        if (!z_node.needs_grad) return;
        Tape<S>::touch_grad(z_node);
        const S g = self.grad[0] * inv_rows;
        for (size_t i = 0; i < z_node.value.size(); ++i)
            z_node.grad[i] += g * (detail::stable_sigmoid(z_node.value[i]) - y_node.value[i]);
    };
    return tape.push(std::move(nd));
}

template <typename S>
Var<S> ewise_binary(Var<S> a, Var<S> b, OpKind kind) {
    Tape<S>& tape = *a.tape;
    const Tensor<S>& xa = tape.value(a);
    const Tensor<S>& xb = tape.value(b);
    if (!xa.same_shape(xb))
        throw std::invalid_argument("elementwise op: shapes differ, " + xa.shape_str() + " vs " +
                                    xb.shape_str());
    Tensor<S> out(xa.shape());
    for (size_t i = 0; i < xa.size(); ++i)
        out[i] = kind == OpKind::Add   ? xa[i] + xb[i]
                 : kind == OpKind::Sub ? xa[i] - xb[i]
                                       : xa[i] * xb[i];
    typename Tape<S>::Node nd;
    nd.kind = kind;
    nd.inputs = {a.id, b.id};
    nd.value = std::move(out);
    nd.needs_grad = detail::any_needs_grad<S>({a, b});
    nd.backward = [kind](Tape<S>& t, typename Tape<S>::Node& self) {
        auto& an = t.node_at(self.inputs[0]);
        auto& bn = t.node_at(self.inputs[1]);
        if (an.needs_grad) {
            Tape<S>::touch_grad(an);
            for (size_t i = 0; i < self.grad.size(); ++i)
                an.grad[i] += kind == OpKind::Mul ? self.grad[i] * bn.value[i] : self.grad[i];
        }
        if (bn.needs_grad) {
            Tape<S>::touch_grad(bn);
            for (size_t i = 0; i < self.grad.size(); ++i)
                bn.grad[i] += kind == OpKind::Add   ? self.grad[i]
                              : kind == OpKind::Sub ? -self.grad[i]
                                                    : self.grad[i] * an.value[i];
        }
    };
    return tape.push(std::move(nd));
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
    return ewise_binary(a, b, OpKind::Add);
}
template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
    return ewise_binary(a, b, OpKind::Sub);
}
template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
    return ewise_binary(a, b, OpKind::Mul);
}

template <typename S>
Var<S> scalar_mul(Var<S> a, S c) {
    Tape<S>& tape = *a.tape;
    const Tensor<S>& x = tape.value(a);
    Tensor<S> out(x.shape());
    for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * c;
    typename Tape<S>::Node nd;
    nd.kind = OpKind::ScalarMul;
    nd.inputs = {a.id};
    nd.value = std::move(out);
    nd.needs_grad = tape.needs_grad(a);
    nd.backward = [c](Tape<S>& t, typename Tape<S>::Node& self) {
        auto& an = t.node_at(self.inputs[0]);
        if (!an.needs_grad) return;
        Tape<S>::touch_grad(an);
        for (size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += self.grad[i] * c;
    };
    return tape.push(std::move(nd));
}

template <typename S>
Var<S> reduce_sum(Var<S> a) {
    Tape<S>& tape = *a.tape;
    const Tensor<S>& x = tape.value(a);
    Tensor<S> out({1}, {detail::sum_lanes(x.data(), x.size())});
    typename Tape<S>::Node nd;
    nd.kind = OpKind::Sum;
    nd.inputs = {a.id};
    nd.value = std::move(out);
    nd.needs_grad = tape.needs_grad(a);
    nd.backward = [](Tape<S>& t, typename Tape<S>::Node& self) {
        auto& an = t.node_at(self.inputs[0]);
        if (!an.needs_grad) return;
        Tape<S>::touch_grad(an);
        for (size_t i = 0; i < an.grad.size(); ++i) an.grad[i] += self.grad[0];
    };
    return tape.push(std::move(nd));
}

template <typename S>
Var<S> reduce_mean(Var<S> a) {
    Tape<S>& tape = *a.tape;
    const Tensor<S>& x = tape.value(a);
    const S inv = S(1) / S(x.size());
    Tensor<S> out({1}, {detail::sum_lanes(x.data(), x.size()) * inv});
    typename Tape<S>::Node nd;
    nd.kind = OpKind::Mean;
    nd.inputs = {a.id};
    nd.value = std::move(out);
    nd.needs_grad = tape.needs_grad(a);
    nd.backward = [inv](Tape<S>& t, typename Tape<S>::Node& self) {
        auto& an = t.node_at(self.inputs[0]);
        if (!an.needs_grad) return;
        Tape<S>::touch_grad(an);
        for (size_t i = 0; i < an.grad.size(); ++i) an.grad[i] += self.grad[0] * inv;
    };
    return tape.push(std::move(nd));
}

// out[i] = x[indices[i]] over rows of a 2-d tensor. Rows may repeat; backward
// scatter-adds, which is what lets shared rows feed several instances.
template <typename S>
Var<S> gather_rows(Var<S> a, std::vector<int> indices) {
    Tape<S>& tape = *a.tape;
    const Tensor<S>& x = tape.value(a);
    if (x.ndim() != 2) throw std::invalid_argument("gather_rows: expected 2-d input");
    const int d = x.dim(1);
    for (int idx : indices)
        if (idx < 0 || idx >= x.dim(0))
            throw std::invalid_argument("gather_rows: index " + std::to_string(idx) +
                                        " out of range [0," + std::to_string(x.dim(0)) + ")");
    Tensor<S> out({int(indices.size()), d});
    for (size_t r = 0; r < indices.size(); ++r)
        for (int j = 0; j < d; ++j) out.at2(int(r), j) = x.at2(indices[r], j);
    typename Tape<S>::Node nd;
    nd.kind = OpKind::GatherRows;
    nd.inputs = {a.id};
    nd.value = std::move(out);
    nd.needs_grad = tape.needs_grad(a);
    nd.backward = [indices = std::move(indices), d](Tape<S>& t, typename Tape<S>::Node& self) {
        auto& an = t.node_at(self.inputs[0]);
        if (!an.needs_grad) return;
        Tape<S>::touch_grad(an);
        for (size_t r = 0; r < indices.size(); ++r)
            for (int j = 0; j < d; ++j)
                an.grad[size_t(indices[r]) * d + j] += self.grad[r * size_t(d) + j];
    };
    return tape.push(std::move(nd));
}

template <typename S>
Var<S> concat_rows(std::span<const Var<S>> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    Tape<S>& tape = *parts[0].tape;
    const int d = tape.value(parts[0]).dim(1);
    int rows = 0;
    bool needs = false;
    for (Var<S> v : parts) {
        const Tensor<S>& x = tape.value(v);
        if (x.ndim() != 2 || x.dim(1) != d)
            throw std::invalid_argument("concat_rows: inconsistent column count");
        rows += x.dim(0);
        needs = needs || tape.needs_grad(v);
    }
    Tensor<S> out({rows, d});
    typename Tape<S>::Node nd;
    nd.kind = OpKind::ConcatRows;
    int at = 0;
    for (Var<S> v : parts) {
        const Tensor<S>& x = tape.value(v);
        std::copy(x.data(), x.data() + x.size(), out.data() + size_t(at) * d);
        at += x.dim(0);
        nd.inputs.push_back(v.id);
    }
    nd.value = std::move(out);
    nd.needs_grad = needs;
    nd.backward = [d](Tape<S>& t, typename Tape<S>::Node& self) {
        size_t at = 0;
        for (int in : self.inputs) {
            auto& n = t.node_at(in);
            size_t len = n.value.size();
            if (n.needs_grad) {
                Tape<S>::touch_grad(n);
                for (size_t i = 0; i < len; ++i) n.grad[i] += self.grad[at + i];
            }
            at += len;
        }
    };
    return tape.push(std::move(nd));
}

template <typename S>
Var<S> reshape(Var<S> a, std::vector<int> new_shape) {
    Tape<S>& tape = *a.tape;
    const Tensor<S>& x = tape.value(a);
    if (Tensor<S>::count(new_shape) != x.size())
        throw std::invalid_argument("reshape: element count mismatch");
    Tensor<S> out(std::move(new_shape), x.values());
    typename Tape<S>::Node nd;
    nd.kind = OpKind::Reshape;
    nd.inputs = {a.id};
    nd.value = std::move(out);
    nd.needs_grad = tape.needs_grad(a);
    nd.backward = [](Tape<S>& t, typename Tape<S>::Node& self) {
        t.add_grad(self.inputs[0], self.grad);
    };
    return tape.push(std::move(nd));
}

// Subtracts the mean of rows 0 and 1 from every row: out[j] = x[j] - (x[0]+x[1])/2.
// The centroid is part of the graph, so gradient flows through it.
template <typename S>
Var<S> decentralize_rows(Var<S> a) {
    Tape<S>& tape = *a.tape;
    const Tensor<S>& x = tape.value(a);
    if (x.ndim() != 2 || x.dim(0) < 2)
        throw std::invalid_argument("decentralize_rows: need a 2-d tensor with >= 2 rows");
    const int rows = x.dim(0), d = x.dim(1);
    Tensor<S> out({rows, d});
    for (int j = 0; j < d; ++j) {
        S c = (x.at2(0, j) + x.at2(1, j)) * S(0.5);
        for (int r = 0; r < rows; ++r) out.at2(r, j) = x.at2(r, j) - c;
    }
    typename Tape<S>::Node nd;
    nd.kind = OpKind::DecentralizeRows;
    nd.inputs = {a.id};
    nd.value = std::move(out);
    nd.needs_grad = tape.needs_grad(a);
    nd.backward = [rows, d](Tape<S>& t, typename Tape<S>::Node& self) {
        auto& an = t.node_at(self.inputs[0]);
        if (!an.needs_grad) return;
        Tape<S>::touch_grad(an);
        for (int j = 0; j < d; ++j) {
            S gsum = S(0);
            for (int r = 0; r < rows; ++r) {
                S g = self.grad[size_t(r) * d + j];
                an.grad[size_t(r) * d + j] += g;
                gsum += g;
            }
            an.grad[size_t(0) * d + j] -= gsum * S(0.5);
            an.grad[size_t(1) * d + j] -= gsum * S(0.5);
        }
    };
    return tape.push(std::move(nd));
}

}  // namespace ncd
