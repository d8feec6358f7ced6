#include "xkd/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace xkd {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;
using StrideRM = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStrideRM = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

int64_t numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) fail("tensor dimension must be positive");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int> s, double fill) : shape(std::move(s)) {
    v.assign(static_cast<size_t>(numel(shape)), fill);
}

Tensor Tensor::scalar(double x) {
    Tensor t({1});
    t.v[0] = x;
    return t;
}

Tensor Tensor::from(std::vector<int> s, std::vector<double> data) {
    Tensor t;
    t.shape = std::move(s);
    if (numel(t.shape) != static_cast<int64_t>(data.size())) fail("Tensor::from: size mismatch");
    t.v = std::move(data);
    return t;
}

bool Tensor::all_finite() const {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

std::string Tensor::shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

// ---------------------------------------------------------------------------
// Graph plumbing
// ---------------------------------------------------------------------------

static std::atomic<int64_t> g_next_id{1};
static thread_local bool g_grad_enabled = true;

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

Tensor& Node::ensure_grad() {
    if (grad.v.empty()) grad = Tensor(value.shape, 0.0);
    return grad;
}

Var::Var(Tensor value, bool requires_grad) {
    node_ = std::make_shared<Node>();
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->id = g_next_id.fetch_add(1);
}

double Var::item() const {
    if (!defined() || val().size() != 1) fail("Var::item: not a scalar");
    return val().v[0];
}

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
    Var out(std::move(value), false);
    bool need = false;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p.defined() && p.requires_grad()) need = true;
    }
    if (need) {
        auto n = out.node();
        n->requires_grad = true;
        for (const auto& p : parents)
            if (p.defined()) n->parents.push_back(p.node());
        n->backprop = std::move(fn);
    }
    return out;
}

Var constant(Tensor t) { return Var(std::move(t), false); }

void backward(const Var& loss) {
    if (!loss.defined() || loss.val().size() != 1) fail("backward: loss must be a defined scalar");
    // Collect reachable grad-requiring nodes; creation ids give topo order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{loss.node().get()};
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (!n->requires_grad || seen.count(n)) continue;
        seen.insert(n);
        order.push_back(n);
        for (auto& p : n->parents) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
    loss.node()->ensure_grad().v[0] += 1.0;
    for (Node* n : order) {
        if (n->backprop && !n->grad.v.empty()) n->backprop(*n);
    }
}

// Convenience: grad tensor of a parent node (allocating on demand).
static Tensor& pgrad(const std::shared_ptr<Node>& p) { return p->ensure_grad(); }
static bool pneeds(const std::shared_ptr<Node>& p) { return p->requires_grad; }

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    if (!a.val().same_shape(b.val())) fail("add: shape mismatch " + a.val().shape_str() + " vs " + b.val().shape_str());
    Tensor out = a.val();
    for (int64_t i = 0; i < out.size(); ++i) out.v[i] += b.val().v[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        for (int s = 0; s < 2; ++s) {
            auto& p = self.parents[s];
            if (!pneeds(p)) continue;
            Tensor& g = pgrad(p);
            for (int64_t i = 0; i < g.size(); ++i) g.v[i] += self.grad.v[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    if (!a.val().same_shape(b.val())) fail("sub: shape mismatch");
    Tensor out = a.val();
    for (int64_t i = 0; i < out.size(); ++i) out.v[i] -= b.val().v[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        if (pneeds(self.parents[0])) {
            Tensor& g = pgrad(self.parents[0]);
            for (int64_t i = 0; i < g.size(); ++i) g.v[i] += self.grad.v[i];
        }
        if (pneeds(self.parents[1])) {
            Tensor& g = pgrad(self.parents[1]);
            for (int64_t i = 0; i < g.size(); ++i) g.v[i] -= self.grad.v[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    if (!a.val().same_shape(b.val())) fail("mul: shape mismatch");
    Tensor out = a.val();
    for (int64_t i = 0; i < out.size(); ++i) out.v[i] *= b.val().v[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        if (pneeds(self.parents[0])) {
            Tensor& g = pgrad(self.parents[0]);
            for (int64_t i = 0; i < g.size(); ++i) g.v[i] += self.grad.v[i] * bv.v[i];
        }
        if (pneeds(self.parents[1])) {
            Tensor& g = pgrad(self.parents[1]);
            for (int64_t i = 0; i < g.size(); ++i) g.v[i] += self.grad.v[i] * av.v[i];
        }
    });
}

Var affine(const Var& x, double k, double c) {
    Tensor out = x.val();
    for (auto& e : out.v) e = k * e + c;
    return make_op(std::move(out), {x}, [k](Node& self) {
        if (!pneeds(self.parents[0])) return;
        Tensor& g = pgrad(self.parents[0]);
        for (int64_t i = 0; i < g.size(); ++i) g.v[i] += k * self.grad.v[i];
    });
}

Var scale(const Var& x, double k) { return affine(x, k, 0.0); }

Var relu(const Var& x) {
    Tensor out = x.val();
    for (auto& e : out.v) e = e > 0.0 ? e : 0.0;
    return make_op(std::move(out), {x}, [](Node& self) {
        if (!pneeds(self.parents[0])) return;
        const Tensor& xv = self.parents[0]->value;
        Tensor& g = pgrad(self.parents[0]);
        for (int64_t i = 0; i < g.size(); ++i)
            if (xv.v[i] > 0.0) g.v[i] += self.grad.v[i];
    });
}

Var vsigmoid(const Var& x) {
    Tensor out = x.val();
    for (auto& e : out.v) e = 1.0 / (1.0 + std::exp(-e));
    Tensor saved = out;
    return make_op(std::move(out), {x}, [saved](Node& self) {
        if (!pneeds(self.parents[0])) return;
        Tensor& g = pgrad(self.parents[0]);
        for (int64_t i = 0; i < g.size(); ++i) {
            double s = saved.v[i];
            g.v[i] += self.grad.v[i] * s * (1.0 - s);
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, 'same' padding, k in {1,3})
// ---------------------------------------------------------------------------

static void im2col(const Tensor& x, int n, int k, int pad, RowMat& col) {
    const int cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    col.resize(cin * k * k, H * W);
    const double* base = x.v.data() + static_cast<size_t>(n) * cin * H * W;
    for (int c = 0; c < cin; ++c) {
        const double* plane = base + static_cast<size_t>(c) * H * W;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* dst = col.row(c * k * k + ky * k + kx).data();
                for (int y = 0; y < H; ++y) {
                    int sy = y + ky - pad;
                    if (sy < 0 || sy >= H) {
                        std::fill(dst + y * W, dst + (y + 1) * W, 0.0);
                        continue;
                    }
                    const double* src = plane + static_cast<size_t>(sy) * W;
                    for (int xo = 0; xo < W; ++xo) {
                        int sx = xo + kx - pad;
                        dst[y * W + xo] = (sx < 0 || sx >= W) ? 0.0 : src[sx];
                    }
                }
            }
        }
    }
}

static void col2im_add(const RowMat& col, int k, int pad, Tensor& dx, int n) {
    const int cin = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
    double* base = dx.v.data() + static_cast<size_t>(n) * cin * H * W;
    for (int c = 0; c < cin; ++c) {
        double* plane = base + static_cast<size_t>(c) * H * W;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* src = col.row(c * k * k + ky * k + kx).data();
                for (int y = 0; y < H; ++y) {
                    int sy = y + ky - pad;
                    if (sy < 0 || sy >= H) continue;
                    double* dstrow = plane + static_cast<size_t>(sy) * W;
                    for (int xo = 0; xo < W; ++xo) {
                        int sx = xo + kx - pad;
                        if (sx < 0 || sx >= W) continue;
                        dstrow[sx] += src[y * W + xo];
                    }
                }
            }
        }
    }
}

Var conv2d(const Var& x, const Var& w, const Var& bias) {
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    if (xv.rank() != 4 || wv.rank() != 4) fail("conv2d: expects 4-d input and weights");
    const int N = xv.dim(0), cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int cout = wv.dim(0), k = wv.dim(2);
    if (wv.dim(1) != cin || wv.dim(3) != k || (k != 1 && k != 3))
        fail("conv2d: weight shape " + wv.shape_str() + " incompatible with input " + xv.shape_str());
    if (bias.defined() && (bias.val().rank() != 1 || bias.val().dim(0) != cout))
        fail("conv2d: bias shape mismatch");
    const int pad = k / 2;
    const int K = cin * k * k, HW = H * W;

    Tensor out({N, cout, H, W});
    CMapRM wm(wv.v.data(), cout, K);
    RowMat col;
    for (int n = 0; n < N; ++n) {
        MapRM y(out.v.data() + static_cast<size_t>(n) * cout * HW, cout, HW);
        if (k == 1) {
            CMapRM xm(xv.v.data() + static_cast<size_t>(n) * cin * HW, cin, HW);
            y.noalias() = wm * xm;
        } else {
            im2col(xv, n, k, pad, col);
            y.noalias() = wm * col;
        }
        if (bias.defined())
            for (int co = 0; co < cout; ++co) y.row(co).array() += bias.val().v[static_cast<size_t>(co)];
    }

    std::vector<Var> parents = bias.defined() ? std::vector<Var>{x, w, bias} : std::vector<Var>{x, w};
    return make_op(std::move(out), std::move(parents), [k, pad](Node& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        const Tensor& xv2 = px->value;
        const Tensor& wv2 = pw->value;
        const int N = xv2.dim(0), cin = xv2.dim(1), H = xv2.dim(2), W = xv2.dim(3);
        const int cout = wv2.dim(0), K = cin * k * k, HW = H * W;
        CMapRM wm(wv2.v.data(), cout, K);
        RowMat col, dcol;
        for (int n = 0; n < N; ++n) {
            CMapRM dy(self.grad.v.data() + static_cast<size_t>(n) * cout * HW, cout, HW);
            if (pneeds(pw)) {
                MapRM dwm(pgrad(pw).v.data(), cout, K);
                if (k == 1) {
                    CMapRM xm(xv2.v.data() + static_cast<size_t>(n) * cin * HW, cin, HW);
                    dwm.noalias() += dy * xm.transpose();
                } else {
                    im2col(xv2, n, k, pad, col);
                    dwm.noalias() += dy * col.transpose();
                }
            }
            if (pneeds(px)) {
                if (k == 1) {
                    MapRM dxm(pgrad(px).v.data() + static_cast<size_t>(n) * cin * HW, cin, HW);
                    dxm.noalias() += wm.transpose() * dy;
                } else {
                    dcol.noalias() = wm.transpose() * dy;
                    col2im_add(dcol, k, pad, pgrad(px), n);
                }
            }
            if (self.parents.size() == 3 && pneeds(self.parents[2])) {
                Tensor& db = pgrad(self.parents[2]);
                for (int co = 0; co < cout; ++co) db.v[static_cast<size_t>(co)] += dy.row(co).sum();
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Pooling / norm / reshape
// ---------------------------------------------------------------------------

Var avg_pool2(const Var& x) {
    const Tensor& xv = x.val();
    if (xv.rank() != 4 || xv.dim(2) % 2 || xv.dim(3) % 2) fail("avg_pool2: needs even spatial dims");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor out({N, C, H / 2, W / 2});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H / 2; ++y)
                for (int xo = 0; xo < W / 2; ++xo)
                    out.at4(n, c, y, xo) =
                        0.25 * (xv.at4(n, c, 2 * y, 2 * xo) + xv.at4(n, c, 2 * y, 2 * xo + 1) +
                                xv.at4(n, c, 2 * y + 1, 2 * xo) + xv.at4(n, c, 2 * y + 1, 2 * xo + 1));
    return make_op(std::move(out), {x}, [](Node& self) {
        if (!pneeds(self.parents[0])) return;
        Tensor& dx = pgrad(self.parents[0]);
        const int N = dx.dim(0), C = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H / 2; ++y)
                    for (int xo = 0; xo < W / 2; ++xo) {
                        double g = 0.25 * self.grad.at4(n, c, y, xo);
                        dx.at4(n, c, 2 * y, 2 * xo) += g;
                        dx.at4(n, c, 2 * y, 2 * xo + 1) += g;
                        dx.at4(n, c, 2 * y + 1, 2 * xo) += g;
                        dx.at4(n, c, 2 * y + 1, 2 * xo + 1) += g;
                    }
    });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    const Tensor& xv = x.val();
    if (xv.rank() != 4) fail("group_norm: expects 4-d input");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (C % groups) fail("group_norm: groups must divide channels");
    if (gamma.val().size() != C || beta.val().size() != C) fail("group_norm: affine shape mismatch");
    const int cg = C / groups;
    const int64_t m = static_cast<int64_t>(cg) * H * W;

    Tensor out({N, C, H, W});
    Tensor mean({N, groups}), inv_std({N, groups});
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            double s = 0.0, s2 = 0.0;
            for (int c = g * cg; c < (g + 1) * cg; ++c)
                for (int y = 0; y < H; ++y)
                    for (int xo = 0; xo < W; ++xo) {
                        double e = xv.at4(n, c, y, xo);
                        s += e;
                        s2 += e * e;
                    }
            double mu = s / static_cast<double>(m);
            double var = s2 / static_cast<double>(m) - mu * mu;
            double is = 1.0 / std::sqrt(var + eps);
            mean.at2(n, g) = mu;
            inv_std.at2(n, g) = is;
            for (int c = g * cg; c < (g + 1) * cg; ++c) {
                double gm = gamma.val().v[static_cast<size_t>(c)];
                double bt = beta.val().v[static_cast<size_t>(c)];
                for (int y = 0; y < H; ++y)
                    for (int xo = 0; xo < W; ++xo)
                        out.at4(n, c, y, xo) = gm * (xv.at4(n, c, y, xo) - mu) * is + bt;
            }
        }
    }

    return make_op(std::move(out), {x, gamma, beta}, [groups, mean, inv_std](Node& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        const Tensor& xv2 = px->value;
        const Tensor& gv = pg->value;
        const int N = xv2.dim(0), C = xv2.dim(1), H = xv2.dim(2), W = xv2.dim(3);
        const int cg = C / groups;
        const double m = static_cast<double>(cg) * H * W;
        for (int n = 0; n < N; ++n) {
            for (int g = 0; g < groups; ++g) {
                const double mu = mean.at2(n, g), is = inv_std.at2(n, g);
                double sum_h = 0.0, sum_hx = 0.0;
                for (int c = g * cg; c < (g + 1) * cg; ++c) {
                    const double gm = gv.v[static_cast<size_t>(c)];
                    for (int y = 0; y < H; ++y)
                        for (int xo = 0; xo < W; ++xo) {
                            double xhat = (xv2.at4(n, c, y, xo) - mu) * is;
                            double dy = self.grad.at4(n, c, y, xo);
                            if (pneeds(pg)) pgrad(pg).v[static_cast<size_t>(c)] += dy * xhat;
                            if (pneeds(pb)) pgrad(pb).v[static_cast<size_t>(c)] += dy;
                            sum_h += dy * gm;
                            sum_hx += dy * gm * xhat;
                        }
                }
                if (pneeds(px)) {
                    Tensor& dx = pgrad(px);
                    const double mh = sum_h / m, mhx = sum_hx / m;
                    for (int c = g * cg; c < (g + 1) * cg; ++c) {
                        const double gm = gv.v[static_cast<size_t>(c)];
                        for (int y = 0; y < H; ++y)
                            for (int xo = 0; xo < W; ++xo) {
                                double xhat = (xv2.at4(n, c, y, xo) - mu) * is;
                                double h = self.grad.at4(n, c, y, xo) * gm;
                                dx.at4(n, c, y, xo) += is * (h - mh - xhat * mhx);
                            }
                    }
                }
            }
        }
    });
}

Var global_avg_pool(const Var& x) {
    const Tensor& xv = x.val();
    if (xv.rank() != 4) fail("global_avg_pool: expects 4-d input");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const double inv = 1.0 / (static_cast<double>(H) * W);
    Tensor out({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int y = 0; y < H; ++y)
                for (int xo = 0; xo < W; ++xo) s += xv.at4(n, c, y, xo);
            out.at2(n, c) = s * inv;
        }
    return make_op(std::move(out), {x}, [inv](Node& self) {
        if (!pneeds(self.parents[0])) return;
        Tensor& dx = pgrad(self.parents[0]);
        const int N = dx.dim(0), C = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double g = self.grad.at2(n, c) * inv;
                for (int y = 0; y < H; ++y)
                    for (int xo = 0; xo < W; ++xo) dx.at4(n, c, y, xo) += g;
            }
    });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    if (xv.rank() != 2 || wv.rank() != 2 || wv.dim(1) != xv.dim(1)) fail("linear: shape mismatch");
    const int N = xv.dim(0), fin = xv.dim(1), fout = wv.dim(0);
    if (bias.defined() && bias.val().size() != fout) fail("linear: bias shape mismatch");
    Tensor out({N, fout});
    CMapRM xm(xv.v.data(), N, fin), wm(wv.v.data(), fout, fin);
    MapRM ym(out.v.data(), N, fout);
    ym.noalias() = xm * wm.transpose();
    if (bias.defined())
        for (int n = 0; n < N; ++n)
            for (int f = 0; f < fout; ++f) out.at2(n, f) += bias.val().v[static_cast<size_t>(f)];
    std::vector<Var> parents = bias.defined() ? std::vector<Var>{x, w, bias} : std::vector<Var>{x, w};
    return make_op(std::move(out), std::move(parents), [](Node& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        const int N = px->value.dim(0), fin = px->value.dim(1), fout = pw->value.dim(0);
        CMapRM dy(self.grad.v.data(), N, fout);
        if (pneeds(px)) {
            CMapRM wm(pw->value.v.data(), fout, fin);
            MapRM dx(pgrad(px).v.data(), N, fin);
            dx.noalias() += dy * wm;
        }
        if (pneeds(pw)) {
            CMapRM xm(px->value.v.data(), N, fin);
            MapRM dw(pgrad(pw).v.data(), fout, fin);
            dw.noalias() += dy.transpose() * xm;
        }
        if (self.parents.size() == 3 && pneeds(self.parents[2])) {
            Tensor& db = pgrad(self.parents[2]);
            for (int f = 0; f < fout; ++f) db.v[static_cast<size_t>(f)] += dy.col(f).sum();
        }
    });
}

Var concat_cols(const Var& a, const Var& b) {
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(0) != bv.dim(0)) fail("concat_cols: shape mismatch");
    const int N = av.dim(0), fa = av.dim(1), fb = bv.dim(1);
    Tensor out({N, fa + fb});
    for (int n = 0; n < N; ++n) {
        for (int f = 0; f < fa; ++f) out.at2(n, f) = av.at2(n, f);
        for (int f = 0; f < fb; ++f) out.at2(n, fa + f) = bv.at2(n, f);
    }
    return make_op(std::move(out), {a, b}, [fa, fb](Node& self) {
        const int N = self.value.dim(0);
        if (pneeds(self.parents[0])) {
            Tensor& da = pgrad(self.parents[0]);
            for (int n = 0; n < N; ++n)
                for (int f = 0; f < fa; ++f) da.at2(n, f) += self.grad.at2(n, f);
        }
        if (pneeds(self.parents[1])) {
            Tensor& db = pgrad(self.parents[1]);
            for (int n = 0; n < N; ++n)
                for (int f = 0; f < fb; ++f) db.at2(n, f) += self.grad.at2(n, fa + f);
        }
    });
}

Var mul_channel(const Var& x, const Var& s) {
    const Tensor& xv = x.val();
    if (xv.rank() != 4 || s.val().size() != xv.dim(1)) fail("mul_channel: shape mismatch");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor out = xv;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double k = s.val().v[static_cast<size_t>(c)];
            for (int y = 0; y < H; ++y)
                for (int xo = 0; xo < W; ++xo) out.at4(n, c, y, xo) *= k;
        }
    return make_op(std::move(out), {x, s}, [](Node& self) {
        const Tensor& xv2 = self.parents[0]->value;
        const Tensor& sv = self.parents[1]->value;
        const int N = xv2.dim(0), C = xv2.dim(1), H = xv2.dim(2), W = xv2.dim(3);
        if (pneeds(self.parents[0])) {
            Tensor& dx = pgrad(self.parents[0]);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    double k = sv.v[static_cast<size_t>(c)];
                    for (int y = 0; y < H; ++y)
                        for (int xo = 0; xo < W; ++xo) dx.at4(n, c, y, xo) += k * self.grad.at4(n, c, y, xo);
                }
        }
        if (pneeds(self.parents[1])) {
            Tensor& ds = pgrad(self.parents[1]);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int y = 0; y < H; ++y)
                        for (int xo = 0; xo < W; ++xo) acc += xv2.at4(n, c, y, xo) * self.grad.at4(n, c, y, xo);
                    ds.v[static_cast<size_t>(c)] += acc;
                }
        }
    });
}

Var mul_mask(const Var& x, const Var& m) {
    const Tensor& xv = x.val();
    const Tensor& mv = m.val();
    if (xv.rank() != 4 || mv.rank() != 4 || mv.dim(1) != 1 || mv.dim(0) != xv.dim(0) ||
        mv.dim(2) != xv.dim(2) || mv.dim(3) != xv.dim(3))
        fail("mul_mask: mask must be (N,1,H,W) matching input");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor out = xv;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xo = 0; xo < W; ++xo) out.at4(n, c, y, xo) *= mv.at4(n, 0, y, xo);
    return make_op(std::move(out), {x, m}, [](Node& self) {
        const Tensor& xv2 = self.parents[0]->value;
        const Tensor& mv2 = self.parents[1]->value;
        const int N = xv2.dim(0), C = xv2.dim(1), H = xv2.dim(2), W = xv2.dim(3);
        if (pneeds(self.parents[0])) {
            Tensor& dx = pgrad(self.parents[0]);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int y = 0; y < H; ++y)
                        for (int xo = 0; xo < W; ++xo)
                            dx.at4(n, c, y, xo) += mv2.at4(n, 0, y, xo) * self.grad.at4(n, c, y, xo);
        }
        if (pneeds(self.parents[1])) {
            Tensor& dm = pgrad(self.parents[1]);
            for (int n = 0; n < N; ++n)
                for (int y = 0; y < H; ++y)
                    for (int xo = 0; xo < W; ++xo) {
                        double acc = 0.0;
                        for (int c = 0; c < C; ++c) acc += xv2.at4(n, c, y, xo) * self.grad.at4(n, c, y, xo);
                        dm.at4(n, 0, y, xo) += acc;
                    }
        }
    });
}

// Half-pixel-center bilinear sampling; edges clamped.
struct AxisTap {
    int i0, i1;
    double f;
};

static std::vector<AxisTap> bilinear_taps(int in, int out) {
    std::vector<AxisTap> taps(static_cast<size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * scale - 0.5;
        AxisTap t;
        if (src <= 0.0) {
            t = {0, 0, 0.0};
        } else if (src >= in - 1) {
            t = {in - 1, in - 1, 0.0};
        } else {
            int i0 = static_cast<int>(std::floor(src));
            t = {i0, i0 + 1, src - i0};
        }
        taps[static_cast<size_t>(o)] = t;
    }
    return taps;
}

Var resize_bilinear(const Var& x, int out_h, int out_w) {
    const Tensor& xv = x.val();
    if (xv.rank() != 4) fail("resize_bilinear: expects 4-d input");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    auto ty = bilinear_taps(H, out_h);
    auto tx = bilinear_taps(W, out_w);
    Tensor out({N, C, out_h, out_w});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < out_h; ++y) {
                const auto& a = ty[static_cast<size_t>(y)];
                for (int xo = 0; xo < out_w; ++xo) {
                    const auto& b = tx[static_cast<size_t>(xo)];
                    out.at4(n, c, y, xo) =
                        (1 - a.f) * ((1 - b.f) * xv.at4(n, c, a.i0, b.i0) + b.f * xv.at4(n, c, a.i0, b.i1)) +
                        a.f * ((1 - b.f) * xv.at4(n, c, a.i1, b.i0) + b.f * xv.at4(n, c, a.i1, b.i1));
                }
            }
    return make_op(std::move(out), {x}, [ty, tx](Node& self) {
        if (!pneeds(self.parents[0])) return;
        Tensor& dx = pgrad(self.parents[0]);
        const int N = dx.dim(0), C = dx.dim(1);
        const int oh = self.value.dim(2), ow = self.value.dim(3);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < oh; ++y) {
                    const auto& a = ty[static_cast<size_t>(y)];
                    for (int xo = 0; xo < ow; ++xo) {
                        const auto& b = tx[static_cast<size_t>(xo)];
                        double g = self.grad.at4(n, c, y, xo);
                        dx.at4(n, c, a.i0, b.i0) += (1 - a.f) * (1 - b.f) * g;
                        dx.at4(n, c, a.i0, b.i1) += (1 - a.f) * b.f * g;
                        dx.at4(n, c, a.i1, b.i0) += a.f * (1 - b.f) * g;
                        dx.at4(n, c, a.i1, b.i1) += a.f * b.f * g;
                    }
                }
    });
}

Tensor resize_bilinear_value(const Tensor& x, int out_h, int out_w) {
    NoGradGuard ng;
    return resize_bilinear(constant(x), out_h, out_w).val();
}

Var to_tokens(const Var& x) {
    const Tensor& xv = x.val();
    if (xv.rank() != 4) fail("to_tokens: expects 4-d input");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int S = H * W;
    Tensor out({N, S, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int s = 0; s < S; ++s)
                out.v[(static_cast<size_t>(n) * S + s) * C + c] = xv.v[(static_cast<size_t>(n) * C + c) * S + s];
    return make_op(std::move(out), {x}, [](Node& self) {
        if (!pneeds(self.parents[0])) return;
        Tensor& dx = pgrad(self.parents[0]);
        const int N = dx.dim(0), C = dx.dim(1), S = dx.dim(2) * dx.dim(3);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int s = 0; s < S; ++s)
                    dx.v[(static_cast<size_t>(n) * C + c) * S + s] +=
                        self.grad.v[(static_cast<size_t>(n) * S + s) * C + c];
    });
}

Var from_tokens(const Var& x, int h, int w) {
    const Tensor& xv = x.val();
    if (xv.rank() != 3 || xv.dim(1) != h * w) fail("from_tokens: shape mismatch");
    const int N = xv.dim(0), S = xv.dim(1), C = xv.dim(2);
    Tensor out({N, C, h, w});
    for (int n = 0; n < N; ++n)
        for (int s = 0; s < S; ++s)
            for (int c = 0; c < C; ++c)
                out.v[(static_cast<size_t>(n) * C + c) * S + s] = xv.v[(static_cast<size_t>(n) * S + s) * C + c];
    return make_op(std::move(out), {x}, [](Node& self) {
        if (!pneeds(self.parents[0])) return;
        Tensor& dx = pgrad(self.parents[0]);
        const int N = dx.dim(0), S = dx.dim(1), C = dx.dim(2);
        for (int n = 0; n < N; ++n)
            for (int s = 0; s < S; ++s)
                for (int c = 0; c < C; ++c)
                    dx.v[(static_cast<size_t>(n) * S + s) * C + c] +=
                        self.grad.v[(static_cast<size_t>(n) * C + c) * S + s];
    });
}

Var token_proj(const Var& x, const Var& w) {
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    if (xv.rank() != 3 || wv.rank() != 2 || wv.dim(0) != xv.dim(2)) fail("token_proj: shape mismatch");
    const int N = xv.dim(0), S = xv.dim(1), C = xv.dim(2), Co = wv.dim(1);
    Tensor out({N, S, Co});
    CMapRM wm(wv.v.data(), C, Co);
    for (int n = 0; n < N; ++n) {
        CMapRM xm(xv.v.data() + static_cast<size_t>(n) * S * C, S, C);
        MapRM ym(out.v.data() + static_cast<size_t>(n) * S * Co, S, Co);
        ym.noalias() = xm * wm;
    }
    return make_op(std::move(out), {x, w}, [](Node& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        const int N = px->value.dim(0), S = px->value.dim(1), C = px->value.dim(2);
        const int Co = pw->value.dim(1);
        CMapRM wm(pw->value.v.data(), C, Co);
        for (int n = 0; n < N; ++n) {
            CMapRM dy(self.grad.v.data() + static_cast<size_t>(n) * S * Co, S, Co);
            if (pneeds(px)) {
                MapRM dx(pgrad(px).v.data() + static_cast<size_t>(n) * S * C, S, C);
                dx.noalias() += dy * wm.transpose();
            }
            if (pneeds(pw)) {
                CMapRM xm(px->value.v.data() + static_cast<size_t>(n) * S * C, S, C);
                MapRM dw(pgrad(pw).v.data(), C, Co);
                dw.noalias() += xm.transpose() * dy;
            }
        }
    });
}

Var mhsa(const Var& q, const Var& k, const Var& v, int heads) {
    const Tensor& qv = q.val();
    if (qv.rank() != 3 || !qv.same_shape(k.val()) || !qv.same_shape(v.val()))
        fail("mhsa: q/k/v must share shape (N,S,C)");
    const int N = qv.dim(0), S = qv.dim(1), C = qv.dim(2);
    if (C % heads) fail("mhsa: heads must divide channels");
    const int dh = C / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor out({N, S, C});
    Tensor attn({N * heads, S, S});  // saved softmax weights
    RowMat scores(S, S);
    for (int n = 0; n < N; ++n) {
        for (int hd = 0; hd < heads; ++hd) {
            const size_t off = static_cast<size_t>(n) * S * C + static_cast<size_t>(hd) * dh;
            CStrideRM qm(qv.v.data() + off, S, dh, Eigen::OuterStride<>(C));
            CStrideRM km(k.val().v.data() + off, S, dh, Eigen::OuterStride<>(C));
            CStrideRM vm(v.val().v.data() + off, S, dh, Eigen::OuterStride<>(C));
            scores.noalias() = qm * km.transpose() * sc;
            MapRM am(attn.v.data() + (static_cast<size_t>(n) * heads + hd) * S * S, S, S);
            for (int i = 0; i < S; ++i) {
                double mx = scores.row(i).maxCoeff();
                double z = 0.0;
                for (int j = 0; j < S; ++j) {
                    double e = std::exp(scores(i, j) - mx);
                    am(i, j) = e;
                    z += e;
                }
                am.row(i) /= z;
            }
            StrideRM om(out.v.data() + off, S, dh, Eigen::OuterStride<>(C));
            om.noalias() = am * vm;
        }
    }

    return make_op(std::move(out), {q, k, v}, [heads, attn, sc](Node& self) {
        auto& pq = self.parents[0];
        auto& pk = self.parents[1];
        auto& pv = self.parents[2];
        const int N = pq->value.dim(0), S = pq->value.dim(1), C = pq->value.dim(2);
        const int dh = C / heads;
        RowMat dA(S, S), dS(S, S);
        for (int n = 0; n < N; ++n) {
            for (int hd = 0; hd < heads; ++hd) {
                const size_t off = static_cast<size_t>(n) * S * C + static_cast<size_t>(hd) * dh;
                CMapRM am(attn.v.data() + (static_cast<size_t>(n) * heads + hd) * S * S, S, S);
                CStrideRM dO(self.grad.v.data() + off, S, dh, Eigen::OuterStride<>(C));
                CStrideRM qm(pq->value.v.data() + off, S, dh, Eigen::OuterStride<>(C));
                CStrideRM km(pk->value.v.data() + off, S, dh, Eigen::OuterStride<>(C));
                CStrideRM vm(pv->value.v.data() + off, S, dh, Eigen::OuterStride<>(C));
                if (pneeds(pv)) {
                    StrideRM dv(pgrad(pv).v.data() + off, S, dh, Eigen::OuterStride<>(C));
                    dv.noalias() += am.transpose() * dO;
                }
                if (pneeds(pq) || pneeds(pk)) {
                    dA.noalias() = dO * vm.transpose();
                    for (int i = 0; i < S; ++i) {
                        double r = (dA.row(i).array() * am.row(i).array()).sum();
                        dS.row(i) = am.row(i).array() * (dA.row(i).array() - r);
                    }
                    if (pneeds(pq)) {
                        StrideRM dq(pgrad(pq).v.data() + off, S, dh, Eigen::OuterStride<>(C));
                        dq.noalias() += dS * km * sc;
                    }
                    if (pneeds(pk)) {
                        StrideRM dk(pgrad(pk).v.data() + off, S, dh, Eigen::OuterStride<>(C));
                        dk.noalias() += dS.transpose() * qm * sc;
                    }
                }
            }
        }
    });
}

Var reshape(const Var& x, std::vector<int> shape) {
    if (numel(shape) != x.val().size()) fail("reshape: element count mismatch");
    Tensor out;
    out.shape = std::move(shape);
    out.v = x.val().v;
    return make_op(std::move(out), {x}, [](Node& self) {
        if (!pneeds(self.parents[0])) return;
        Tensor& dx = pgrad(self.parents[0]);
        for (int64_t i = 0; i < dx.size(); ++i) dx.v[i] += self.grad.v[i];
    });
}

Var sum_channel_sq(const Var& x) {
    const Tensor& xv = x.val();
    if (xv.rank() != 4) fail("sum_channel_sq: expects 4-d input");
    const int N = xv.dim(0), C = xv.dim(1), S = xv.dim(2) * xv.dim(3);
    Tensor out({N, S});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* p = xv.v.data() + (static_cast<size_t>(n) * C + c) * S;
            for (int s = 0; s < S; ++s) out.at2(n, s) += p[s] * p[s];
        }
    return make_op(std::move(out), {x}, [](Node& self) {
        if (!pneeds(self.parents[0])) return;
        const Tensor& xv2 = self.parents[0]->value;
        Tensor& dx = pgrad(self.parents[0]);
        const int N = xv2.dim(0), C = xv2.dim(1), S = xv2.dim(2) * xv2.dim(3);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const double* p = xv2.v.data() + (static_cast<size_t>(n) * C + c) * S;
                double* d = dx.v.data() + (static_cast<size_t>(n) * C + c) * S;
                for (int s = 0; s < S; ++s) d[s] += 2.0 * p[s] * self.grad.at2(n, s);
            }
    });
}

Var l2_normalize_rows(const Var& x, double eps) {
    const Tensor& xv = x.val();
    if (xv.rank() != 2) fail("l2_normalize_rows: expects 2-d input");
    const int N = xv.dim(0), F = xv.dim(1);
    Tensor out({N, F});
    Tensor norms({N});
    for (int n = 0; n < N; ++n) {
        double s2 = 0.0;
        for (int f = 0; f < F; ++f) s2 += xv.at2(n, f) * xv.at2(n, f);
        double r = std::sqrt(s2);
        norms.v[static_cast<size_t>(n)] = r;
        if (r > eps)
            for (int f = 0; f < F; ++f) out.at2(n, f) = xv.at2(n, f) / r;
        // zero rows stay zero (guard for empty activation maps)
    }
    return make_op(std::move(out), {x}, [norms, eps](Node& self) {
        if (!pneeds(self.parents[0])) return;
        Tensor& dx = pgrad(self.parents[0]);
        const int N = self.value.dim(0), F = self.value.dim(1);
        for (int n = 0; n < N; ++n) {
            double r = norms.v[static_cast<size_t>(n)];
            if (r <= eps) continue;
            double dot = 0.0;
            for (int f = 0; f < F; ++f) dot += self.value.at2(n, f) * self.grad.at2(n, f);
            for (int f = 0; f < F; ++f)
                dx.at2(n, f) += (self.grad.at2(n, f) - self.value.at2(n, f) * dot) / r;
        }
    });
}

Var mean_rowsum(const Var& x) {
    const Tensor& xv = x.val();
    if (xv.rank() != 2) fail("mean_rowsum: expects 2-d input");
    const int N = xv.dim(0);
    double s = 0.0;
    for (double e : xv.v) s += e;
    Tensor out = Tensor::scalar(s / N);
    return make_op(std::move(out), {x}, [](Node& self) {
        if (!pneeds(self.parents[0])) return;
        Tensor& dx = pgrad(self.parents[0]);
        const double g = self.grad.v[0] / dx.dim(0);
        for (auto& e : dx.v) e += g;
    });
}

Var mse(const Var& a, const Var& b) {
    if (!a.val().same_shape(b.val())) fail("mse: shape mismatch");
    const int64_t n = a.val().size();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double d = a.val().v[i] - b.val().v[i];
        s += d * d;
    }
    Tensor out = Tensor::scalar(s / static_cast<double>(n));
    return make_op(std::move(out), {a, b}, [n](Node& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        const double g = 2.0 * self.grad.v[0] / static_cast<double>(n);
        if (pneeds(self.parents[0])) {
            Tensor& da = pgrad(self.parents[0]);
            for (int64_t i = 0; i < n; ++i) da.v[i] += g * (av.v[i] - bv.v[i]);
        }
        if (pneeds(self.parents[1])) {
            Tensor& db = pgrad(self.parents[1]);
            for (int64_t i = 0; i < n; ++i) db.v[i] -= g * (av.v[i] - bv.v[i]);
        }
    });
}

// ---------------------------------------------------------------------------
// Classification losses
// ---------------------------------------------------------------------------

std::vector<double> softmax_row(const double* z, int n) {
    double mx = z[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, z[i]);
    std::vector<double> p(static_cast<size_t>(n));
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        p[static_cast<size_t>(i)] = std::exp(z[i] - mx);
        s += p[static_cast<size_t>(i)];
    }
    for (auto& e : p) e /= s;
    return p;
}

Tensor softmax_rows(const Tensor& logits) {
    Tensor out = logits;
    const int N = logits.dim(0), C = logits.dim(1);
    for (int n = 0; n < N; ++n) {
        auto p = softmax_row(logits.v.data() + static_cast<size_t>(n) * C, C);
        for (int c = 0; c < C; ++c) out.at2(n, c) = p[static_cast<size_t>(c)];
    }
    return out;
}

Var weighted_ce_loss(const Var& logits, const std::vector<int>& labels,
                     const std::array<double, 2>& class_weights) {
    const Tensor& zv = logits.val();
    if (zv.rank() != 2 || zv.dim(1) != 2) fail("weighted_ce_loss: expects (N,2) logits");
    const int N = zv.dim(0);
    if (static_cast<int>(labels.size()) != N) fail("weighted_ce_loss: label count mismatch");
    double loss = 0.0, wsum = 0.0;
    for (int n = 0; n < N; ++n) {
        int y = labels[static_cast<size_t>(n)];
        if (y < 0 || y > 1) fail("weighted_ce_loss: label out of range");
        const double* z = zv.v.data() + static_cast<size_t>(n) * 2;
        double mx = std::max(z[0], z[1]);
        double lse = mx + std::log(std::exp(z[0] - mx) + std::exp(z[1] - mx));
        double w = class_weights[static_cast<size_t>(y)];
        loss += w * (lse - z[y]);
        wsum += w;
    }
    Tensor out = Tensor::scalar(loss / wsum);
    auto labels_copy = labels;
    return make_op(std::move(out), {logits}, [labels_copy, class_weights, wsum](Node& self) {
        if (!pneeds(self.parents[0])) return;
        const Tensor& zv2 = self.parents[0]->value;
        Tensor& dz = pgrad(self.parents[0]);
        const int N = zv2.dim(0);
        const double g = self.grad.v[0] / wsum;
        for (int n = 0; n < N; ++n) {
            int y = labels_copy[static_cast<size_t>(n)];
            double w = class_weights[static_cast<size_t>(y)];
            auto p = softmax_row(zv2.v.data() + static_cast<size_t>(n) * 2, 2);
            for (int c = 0; c < 2; ++c)
                dz.at2(n, c) += g * w * (p[static_cast<size_t>(c)] - (c == y ? 1.0 : 0.0));
        }
    });
}

Var kd_kl_loss(const Var& student_logits, const Tensor& teacher_logits, double temperature) {
    const Tensor& zs = student_logits.val();
    if (zs.rank() != 2 || !zs.same_shape(teacher_logits)) fail("kd_kl_loss: logits shape mismatch");
    if (temperature <= 0.0) fail("kd_kl_loss: temperature must be positive");
    const int N = zs.dim(0), C = zs.dim(1);
    const double T = temperature;

    Tensor ps({N, C}), pt({N, C});
    std::vector<double> row(static_cast<size_t>(C));
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) row[static_cast<size_t>(c)] = zs.at2(n, c) / T;
        auto a = softmax_row(row.data(), C);
        for (int c = 0; c < C; ++c) ps.at2(n, c) = a[static_cast<size_t>(c)];
        for (int c = 0; c < C; ++c) row[static_cast<size_t>(c)] = teacher_logits.at2(n, c) / T;
        auto b = softmax_row(row.data(), C);
        for (int c = 0; c < C; ++c) pt.at2(n, c) = b[static_cast<size_t>(c)];
    }
    double kl = 0.0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double t = pt.at2(n, c);
            if (t > 0.0) kl += t * (std::log(t) - std::log(ps.at2(n, c)));
        }
    Tensor out = Tensor::scalar(T * T * kl / N);
    return make_op(std::move(out), {student_logits}, [ps, pt, T](Node& self) {
        if (!pneeds(self.parents[0])) return;
        Tensor& dz = pgrad(self.parents[0]);
        const int N = dz.dim(0), C = dz.dim(1);
        const double g = self.grad.v[0] * T / N;
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) dz.at2(n, c) += g * (ps.at2(n, c) - pt.at2(n, c));
    });
}

}  // namespace xkd
