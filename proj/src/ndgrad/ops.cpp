#include "fever/ndgrad/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "fever/errors.hpp"

namespace fever::ndgrad {
namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] void rank_fail(const char* op, const Shape& a, const char* expected) {
    throw ShapeError(std::string(op) + ": expected " + expected + ", got " + shape_str(a));
}

template <typename T>
void require_same(const char* op, const Var<T>& a, const Var<T>& b) {
    if (&a.tape() != &b.tape()) throw InvariantError(std::string(op) + ": inputs on different tapes");
    if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

template <typename T>
void require_rank(const char* op, const Var<T>& x, std::size_t rank, const char* expected) {
    if (x.shape().size() != rank) rank_fail(op, x.shape(), expected);
}

template <typename T>
bool wants_grad(const Var<T>& v) {
    return v.tape().requires_grad(v);
}

// Returns (leading rows, last-axis width) for a row-wise op.
template <typename T>
std::pair<std::size_t, std::size_t> rows_and_width(const char* op, const Var<T>& x) {
    if (x.shape().empty() || x.shape().back() == 0) rank_fail(op, x.shape(), "rank >= 1 with non-empty last axis");
    const std::size_t d = x.shape().back();
    return {x.value().size() / d, d};
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same("add", a, b);
    Array<T> out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
    return a.tape().record("add", std::move(out), {a, b}, [a, b](Tape<T>& t, const Array<T>& g) {
        for (const auto& in : {a, b}) {
            if (!wants_grad(in)) continue;
            auto gi = t.grad_buffer(in.id()).data();
            for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same("sub", a, b);
    Array<T> out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
    return a.tape().record("sub", std::move(out), {a, b}, [a, b](Tape<T>& t, const Array<T>& g) {
        if (wants_grad(a)) {
            auto ga = t.grad_buffer(a.id()).data();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        }
        if (wants_grad(b)) {
            auto gb = t.grad_buffer(b.id()).data();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same("mul", a, b);
    Array<T> out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
    return a.tape().record("mul", std::move(out), {a, b}, [a, b](Tape<T>& t, const Array<T>& g) {
        if (wants_grad(a)) {
            auto ga = t.grad_buffer(a.id()).data();
            auto bv = b.value().data();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (wants_grad(b)) {
            auto gb = t.grad_buffer(b.id()).data();
            auto av = a.value().data();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
    Array<T> out = x.value();
    for (T& v : out.data()) v *= factor;
    return x.tape().record("scale", std::move(out), {x}, [x, factor](Tape<T>& t, const Array<T>& g) {
        auto gx = t.grad_buffer(x.id()).data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * factor;
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T offset) {
    Array<T> out = x.value();
    for (T& v : out.data()) v += offset;
    return x.tape().record("add_scalar", std::move(out), {x}, [x](Tape<T>& t, const Array<T>& g) {
        auto gx = t.grad_buffer(x.id()).data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    Array<T> out = x.value();
    for (T& v : out.data()) v = v > T(0) ? v : T(0);
    return x.tape().record("relu", std::move(out), {x}, [x](Tape<T>& t, const Array<T>& g) {
        auto gx = t.grad_buffer(x.id()).data();
        auto xv = x.value().data();
        for (std::size_t i = 0; i < gx.size(); ++i) {
            if (xv[i] > T(0)) gx[i] += g[i];
        }
    });
}

template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
    const auto [rows, d] = rows_and_width("add_bias", x);
    if (bias.shape() != Shape{d}) shape_fail("add_bias", x.shape(), bias.shape());
    Array<T> out = x.value();
    auto o = out.data();
    auto bv = bias.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) o[r * d + j] += bv[j];
    }
    return x.tape().record("add_bias", std::move(out), {x, bias},
                           [x, bias, rows, d](Tape<T>& t, const Array<T>& g) {
                               if (wants_grad(x)) {
                                   auto gx = t.grad_buffer(x.id()).data();
                                   for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
                               }
                               if (wants_grad(bias)) {
                                   auto gb = t.grad_buffer(bias.id()).data();
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                                   }
                               }
                           });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    require_rank("matmul", a, 2, "rank 2");
    require_rank("matmul", b, 2, "rank 2");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) shape_fail("matmul", a.shape(), b.shape());
    Array<T> out({m, n});
    CMapRM<T> am(a.value().data().data(), m, k);
    CMapRM<T> bm(b.value().data().data(), k, n);
    MapRM<T>(out.data().data(), m, n).noalias() = am * bm;
    return a.tape().record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, const Array<T>& g) {
        CMapRM<T> gm(g.data().data(), m, n);
        if (wants_grad(a)) {
            CMapRM<T> bm(b.value().data().data(), k, n);
            MapRM<T>(t.grad_buffer(a.id()).data().data(), m, k).noalias() += gm * bm.transpose();
        }
        if (wants_grad(b)) {
            CMapRM<T> am(a.value().data().data(), m, k);
            MapRM<T>(t.grad_buffer(b.id()).data().data(), k, n).noalias() += am.transpose() * gm;
        }
    });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    require_rank("transpose", a, 2, "rank 2");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Array<T> out({n, m});
    MapRM<T>(out.data().data(), n, m) = CMapRM<T>(a.value().data().data(), m, n).transpose();
    return a.tape().record("transpose", std::move(out), {a}, [a, m, n](Tape<T>& t, const Array<T>& g) {
        MapRM<T>(t.grad_buffer(a.id()).data().data(), m, n) += CMapRM<T>(g.data().data(), n, m).transpose();
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    require_rank("linear", x, 2, "rank 2 input");
    require_rank("linear", weight, 2, "rank 2 weight");
    if (weight.shape()[1] != x.shape()[1]) shape_fail("linear", x.shape(), weight.shape());
    return add_bias(matmul(x, transpose(weight)), bias);
}

namespace {

struct ConvGeometry {
    std::size_t n, c, h, w, o, kh, kw, oh, ow, stride, pad_top, pad_left;
    std::size_t patch() const { return c * kh * kw; }
    std::size_t columns() const { return n * oh * ow; }
};

ConvGeometry conv_geometry(const Shape& xs, const Shape& ws, std::size_t stride, Padding padding) {
    if (xs.size() != 4) rank_fail("conv2d", xs, "NCHW input");
    if (ws.size() != 4) rank_fail("conv2d", ws, "OIHW weight");
    if (ws[1] != xs[1]) shape_fail("conv2d", xs, ws);
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], 0, 0, stride, 0, 0};
    if (padding == Padding::same) {
        g.oh = (g.h + stride - 1) / stride;
        g.ow = (g.w + stride - 1) / stride;
        const long ph = static_cast<long>((g.oh - 1) * stride + g.kh) - static_cast<long>(g.h);
        const long pw = static_cast<long>((g.ow - 1) * stride + g.kw) - static_cast<long>(g.w);
        g.pad_top = static_cast<std::size_t>(std::max(ph, 0L)) / 2;
        g.pad_left = static_cast<std::size_t>(std::max(pw, 0L)) / 2;
    } else {
        if (g.h < g.kh || g.w < g.kw) shape_fail("conv2d", xs, ws);
        g.oh = (g.h - g.kh) / stride + 1;
        g.ow = (g.w - g.kw) / stride + 1;
    }
    return g;
}

// cols[(c*kh + i)*kw + j, (n*oh + y)*ow + x]
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
    const std::size_t ncols = g.columns();
    for (std::size_t c = 0; c < g.c; ++c) {
        for (std::size_t i = 0; i < g.kh; ++i) {
            for (std::size_t j = 0; j < g.kw; ++j) {
                T* row = cols + ((c * g.kh + i) * g.kw + j) * ncols;
                for (std::size_t n = 0; n < g.n; ++n) {
                    const T* plane = x + (n * g.c + c) * g.h * g.w;
                    for (std::size_t y = 0; y < g.oh; ++y) {
                        const long iy = static_cast<long>(y * g.stride + i) - static_cast<long>(g.pad_top);
                        T* dst = row + (n * g.oh + y) * g.ow;
                        if (iy < 0 || iy >= static_cast<long>(g.h)) {
                            std::fill(dst, dst + g.ow, T(0));
                            continue;
                        }
                        for (std::size_t xx = 0; xx < g.ow; ++xx) {
                            const long ix = static_cast<long>(xx * g.stride + j) - static_cast<long>(g.pad_left);
                            dst[xx] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : plane[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* x) {
    const std::size_t ncols = g.columns();
    for (std::size_t c = 0; c < g.c; ++c) {
        for (std::size_t i = 0; i < g.kh; ++i) {
            for (std::size_t j = 0; j < g.kw; ++j) {
                const T* row = cols + ((c * g.kh + i) * g.kw + j) * ncols;
                for (std::size_t n = 0; n < g.n; ++n) {
                    T* plane = x + (n * g.c + c) * g.h * g.w;
                    for (std::size_t y = 0; y < g.oh; ++y) {
                        const long iy = static_cast<long>(y * g.stride + i) - static_cast<long>(g.pad_top);
                        if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                        const T* src = row + (n * g.oh + y) * g.ow;
                        for (std::size_t xx = 0; xx < g.ow; ++xx) {
                            const long ix = static_cast<long>(xx * g.stride + j) - static_cast<long>(g.pad_left);
                            if (ix >= 0 && ix < static_cast<long>(g.w)) plane[iy * g.w + ix] += src[xx];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, std::size_t stride, Padding padding) {
    const ConvGeometry geo = conv_geometry(x.shape(), weight.shape(), stride, padding);
    const std::size_t plane = geo.oh * geo.ow;
    std::vector<T> cols(geo.patch() * geo.columns());
    im2col(geo, x.value().data().data(), cols.data());
    MatRM<T> outm(geo.o, geo.columns());
    outm.noalias() = CMapRM<T>(weight.value().data().data(), geo.o, geo.patch()) *
                     CMapRM<T>(cols.data(), geo.patch(), geo.columns());
    Array<T> out({geo.n, geo.o, geo.oh, geo.ow});
    auto o = out.data();
    for (std::size_t n = 0; n < geo.n; ++n) {
        for (std::size_t oc = 0; oc < geo.o; ++oc) {
            std::copy_n(outm.data() + oc * geo.columns() + n * plane, plane, o.data() + (n * geo.o + oc) * plane);
        }
    }
    return x.tape().record("conv2d", std::move(out), {x, weight}, [x, weight, geo](Tape<T>& t, const Array<T>& g) {
        const std::size_t plane = geo.oh * geo.ow;
        MatRM<T> gm(geo.o, geo.columns());
        for (std::size_t n = 0; n < geo.n; ++n) {
            for (std::size_t oc = 0; oc < geo.o; ++oc) {
                std::copy_n(g.data().data() + (n * geo.o + oc) * plane, plane,
                            gm.data() + oc * geo.columns() + n * plane);
            }
        }
        std::vector<T> cols(geo.patch() * geo.columns());
        if (wants_grad(weight)) {
            im2col(geo, x.value().data().data(), cols.data());
            MapRM<T>(t.grad_buffer(weight.id()).data().data(), geo.o, geo.patch()).noalias() +=
                gm * CMapRM<T>(cols.data(), geo.patch(), geo.columns()).transpose();
        }
        if (wants_grad(x)) {
            MapRM<T>(cols.data(), geo.patch(), geo.columns()).noalias() =
                CMapRM<T>(weight.value().data().data(), geo.o, geo.patch()).transpose() * gm;
            col2im(geo, cols.data(), t.grad_buffer(x.id()).data().data());
        }
    });
}

template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Array<T>& running_mean,
                   Array<T>& running_var, T momentum, T eps) {
    require_rank("batchnorm2d", x, 4, "NCHW input");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    const Shape cs{c};
    if (gamma.shape() != cs) shape_fail("batchnorm2d", x.shape(), gamma.shape());
    if (beta.shape() != cs) shape_fail("batchnorm2d", x.shape(), beta.shape());
    if (running_mean.shape() != cs) shape_fail("batchnorm2d", x.shape(), running_mean.shape());
    if (running_var.shape() != cs) shape_fail("batchnorm2d", x.shape(), running_var.shape());
    const std::size_t count = n * hw;
    const bool train = x.tape().training();
    if (train && count < 2) throw ShapeError("batchnorm2d: train mode needs more than one value per channel, got " + shape_str(x.shape()));

    auto xv = x.value().data();
    auto gv = gamma.value().data();
    auto bv = beta.value().data();
    Array<T> xhat(x.shape());
    Array<T> out(x.shape());
    std::vector<T> inv_std(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        T mu, var;
        if (train) {
            double s = 0, s2 = 0;
            for (std::size_t b = 0; b < n; ++b) {
                const T* p = xv.data() + (b * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) s += p[i];
            }
            const double m = s / static_cast<double>(count);
            for (std::size_t b = 0; b < n; ++b) {
                const T* p = xv.data() + (b * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) s2 += (p[i] - m) * (p[i] - m);
            }
            mu = static_cast<T>(m);
            var = static_cast<T>(s2 / static_cast<double>(count));
            const T unbiased = static_cast<T>(s2 / static_cast<double>(count - 1));
            running_mean[ch] = (T(1) - momentum) * running_mean[ch] + momentum * mu;
            running_var[ch] = (T(1) - momentum) * running_var[ch] + momentum * unbiased;
        } else {
            mu = running_mean[ch];
            var = running_var[ch];
        }
        inv_std[ch] = T(1) / std::sqrt(var + eps);
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const T h = (xv[off + i] - mu) * inv_std[ch];
                xhat[off + i] = h;
                out[off + i] = gv[ch] * h + bv[ch];
            }
        }
    }
    return x.tape().record(
        "batchnorm2d", std::move(out), {x, gamma, beta},
        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw](Tape<T>& t,
                                                                                       const Array<T>& g) {
            const T count = static_cast<T>(n * hw);
            auto gam = gamma.value().data();
            for (std::size_t ch = 0; ch < c; ++ch) {
                T sum_g = 0, sum_gx = 0;
                for (std::size_t b = 0; b < n; ++b) {
                    const std::size_t off = (b * c + ch) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        sum_g += g[off + i];
                        sum_gx += g[off + i] * xhat[off + i];
                    }
                }
                if (wants_grad(gamma)) t.grad_buffer(gamma.id())[ch] += sum_gx;
                if (wants_grad(beta)) t.grad_buffer(beta.id())[ch] += sum_g;
                if (wants_grad(x)) {
                    auto gx = t.grad_buffer(x.id()).data();
                    const T k = gam[ch] * inv_std[ch] / count;
                    for (std::size_t b = 0; b < n; ++b) {
                        const std::size_t off = (b * c + ch) * hw;
                        for (std::size_t i = 0; i < hw; ++i) {
                            gx[off + i] += k * (count * g[off + i] - sum_g - xhat[off + i] * sum_gx);
                        }
                    }
                }
            }
        });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    require_rank("global_avg_pool", x, 4, "NCHW input");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    if (hw == 0) rank_fail("global_avg_pool", x.shape(), "non-empty spatial dims");
    Array<T> out({n, c});
    auto xv = x.value().data();
    for (std::size_t r = 0; r < n * c; ++r) {
        T s = 0;
        for (std::size_t i = 0; i < hw; ++i) s += xv[r * hw + i];
        out[r] = s / static_cast<T>(hw);
    }
    return x.tape().record("global_avg_pool", std::move(out), {x}, [x, n, c, hw](Tape<T>& t, const Array<T>& g) {
        auto gx = t.grad_buffer(x.id()).data();
        const T inv = T(1) / static_cast<T>(hw);
        for (std::size_t r = 0; r < n * c; ++r) {
            for (std::size_t i = 0; i < hw; ++i) gx[r * hw + i] += g[r] * inv;
        }
    });
}

template <typename T>
Var<T> dropout(const Var<T>& x, double rate, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must be in [0,1)");
    Array<T> out = x.value();
    if (!x.tape().training() || rate == 0.0) {
        return x.tape().record("dropout", std::move(out), {x}, [x](Tape<T>& t, const Array<T>& g) {
            auto gx = t.grad_buffer(x.id()).data();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
        });
    }
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<T> mask(out.size());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = u(rng) < rate ? T(0) : keep_scale;
        out[i] *= mask[i];
    }
    return x.tape().record("dropout", std::move(out), {x}, [x, mask = std::move(mask)](Tape<T>& t, const Array<T>& g) {
        auto gx = t.grad_buffer(x.id()).data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * mask[i];
    });
}

template <typename T>
Var<T> l2_normalize(const Var<T>& x, double eps) {
    const auto [rows, d] = rows_and_width("l2_normalize", x);
    Array<T> out(x.shape());
    std::vector<T> norms(rows);
    auto xv = x.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        T s = 0;
        for (std::size_t j = 0; j < d; ++j) s += xv[r * d + j] * xv[r * d + j];
        const T norm = std::sqrt(s);
        norms[r] = norm;
        if (norm > static_cast<T>(eps)) {
            for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / norm;
        }
    }
    Array<T> y = out;
    return x.tape().record(
        "l2_normalize", std::move(out), {x},
        [x, y = std::move(y), norms = std::move(norms), rows, d, eps](Tape<T>& t, const Array<T>& g) {
            auto gx = t.grad_buffer(x.id()).data();
            for (std::size_t r = 0; r < rows; ++r) {
                if (!(norms[r] > static_cast<T>(eps))) continue;
                T dot = 0;
                for (std::size_t j = 0; j < d; ++j) dot += y[r * d + j] * g[r * d + j];
                for (std::size_t j = 0; j < d; ++j) {
                    gx[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) / norms[r];
                }
            }
        });
}

template <typename T>
Var<T> softmax(const Var<T>& x) {
    const auto [rows, d] = rows_and_width("softmax", x);
    Array<T> out(x.shape());
    auto xv = x.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * d;
        const T mx = *std::max_element(row, row + d);
        T s = 0;
        for (std::size_t j = 0; j < d; ++j) s += (out[r * d + j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] /= s;
    }
    Array<T> y = out;
    return x.tape().record("softmax", std::move(out), {x}, [x, y = std::move(y), rows, d](Tape<T>& t, const Array<T>& g) {
        auto gx = t.grad_buffer(x.id()).data();
        for (std::size_t r = 0; r < rows; ++r) {
            T dot = 0;
            for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
        }
    });
}

template <typename T>
Var<T> log_softmax(const Var<T>& x) {
    const auto [rows, d] = rows_and_width("log_softmax", x);
    Array<T> out(x.shape());
    auto xv = x.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * d;
        const T mx = *std::max_element(row, row + d);
        T s = 0;
        for (std::size_t j = 0; j < d; ++j) s += std::exp(row[j] - mx);
        const T lse = mx + std::log(s);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = row[j] - lse;
    }
    Array<T> y = out;
    return x.tape().record("log_softmax", std::move(out), {x},
                           [x, y = std::move(y), rows, d](Tape<T>& t, const Array<T>& g) {
                               auto gx = t.grad_buffer(x.id()).data();
                               for (std::size_t r = 0; r < rows; ++r) {
                                   T gs = 0;
                                   for (std::size_t j = 0; j < d; ++j) gs += g[r * d + j];
                                   for (std::size_t j = 0; j < d; ++j) {
                                       gx[r * d + j] += g[r * d + j] - std::exp(y[r * d + j]) * gs;
                                   }
                               }
                           });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
    T s = 0;
    for (T v : x.value().data()) s += v;
    return x.tape().record("sum", Array<T>::scalar(s), {x}, [x](Tape<T>& t, const Array<T>& g) {
        const T gv = g[0];
        for (T& v : t.grad_buffer(x.id()).data()) v += gv;
    });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
    if (x.value().size() == 0) rank_fail("mean", x.shape(), "non-empty input");
    const T n = static_cast<T>(x.value().size());
    T s = 0;
    for (T v : x.value().data()) s += v;
    return x.tape().record("mean", Array<T>::scalar(s / n), {x}, [x, n](Tape<T>& t, const Array<T>& g) {
        const T gv = g[0] / n;
        for (T& v : t.grad_buffer(x.id()).data()) v += gv;
    });
}

template <typename T>
Var<T> sum_last(const Var<T>& x) {
    const auto [rows, d] = rows_and_width("sum_last", x);
    Shape s(x.shape().begin(), x.shape().end() - 1);
    Array<T> out(s);
    auto xv = x.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        T acc = 0;
        for (std::size_t j = 0; j < d; ++j) acc += xv[r * d + j];
        out[r] = acc;
    }
    return x.tape().record("sum_last", std::move(out), {x}, [x, rows, d](Tape<T>& t, const Array<T>& g) {
        auto gx = t.grad_buffer(x.id()).data();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r];
        }
    });
}

template <typename T>
Var<T> pairwise_sq_dist(const Var<T>& x) {
    require_rank("pairwise_sq_dist", x, 2, "rank 2");
    const std::size_t n = x.shape()[0], d = x.shape()[1];
    Array<T> out({n, n});
    auto xv = x.value().data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            T s = 0;
            for (std::size_t k = 0; k < d; ++k) {
                const T diff = xv[i * d + k] - xv[j * d + k];
                s += diff * diff;
            }
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    return x.tape().record("pairwise_sq_dist", std::move(out), {x}, [x, n, d](Tape<T>& t, const Array<T>& g) {
        auto gx = t.grad_buffer(x.id()).data();
        auto xv = x.value().data();
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) continue;
                const T w = T(2) * (g[i * n + j] + g[j * n + i]);
                if (w == T(0)) continue;
                for (std::size_t k = 0; k < d; ++k) gx[i * d + k] += w * (xv[i * d + k] - xv[j * d + k]);
            }
        }
    });
}

template <typename T>
Var<T> pairwise_diff(const Var<T>& x) {
    require_rank("pairwise_diff", x, 2, "rank 2");
    const std::size_t n = x.shape()[0], d = x.shape()[1];
    Array<T> out({n, n, d});
    auto xv = x.value().data();
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < d; ++k) out[(j * n + i) * d + k] = xv[i * d + k] - xv[j * d + k];
        }
    }
    return x.tape().record("pairwise_diff", std::move(out), {x}, [x, n, d](Tape<T>& t, const Array<T>& g) {
        auto gx = t.grad_buffer(x.id()).data();
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t k = 0; k < d; ++k) {
                    const T gv = g[(j * n + i) * d + k];
                    gx[i * d + k] += gv;
                    gx[j * d + k] -= gv;
                }
            }
        }
    });
}

template <typename T>
Var<T> bmm_nt(const Var<T>& a, const Var<T>& b) {
    require_rank("bmm_nt", a, 3, "rank 3");
    require_rank("bmm_nt", b, 3, "rank 3");
    const std::size_t batch = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[1];
    if (b.shape()[0] != batch || b.shape()[2] != k) shape_fail("bmm_nt", a.shape(), b.shape());
    Array<T> out({batch, m, n});
    for (std::size_t s = 0; s < batch; ++s) {
        CMapRM<T> am(a.value().data().data() + s * m * k, m, k);
        CMapRM<T> bm(b.value().data().data() + s * n * k, n, k);
        MapRM<T>(out.data().data() + s * m * n, m, n).noalias() = am * bm.transpose();
    }
    return a.tape().record("bmm_nt", std::move(out), {a, b}, [a, b, batch, m, k, n](Tape<T>& t, const Array<T>& g) {
        const bool ga = wants_grad(a), gb = wants_grad(b);
        for (std::size_t s = 0; s < batch; ++s) {
            CMapRM<T> gm(g.data().data() + s * m * n, m, n);
            if (ga) {
                CMapRM<T> bm(b.value().data().data() + s * n * k, n, k);
                MapRM<T>(t.grad_buffer(a.id()).data().data() + s * m * k, m, k).noalias() += gm * bm;
            }
            if (gb) {
                CMapRM<T> am(a.value().data().data() + s * m * k, m, k);
                MapRM<T>(t.grad_buffer(b.id()).data().data() + s * n * k, n, k).noalias() += gm.transpose() * am;
            }
        }
    });
}

template <typename T>
Var<T> safe_sqrt(const Var<T>& x, double eps) {
    Array<T> out(x.shape());
    auto xv = x.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > static_cast<T>(eps) ? std::sqrt(xv[i]) : T(0);
    Array<T> y = out;
    return x.tape().record("safe_sqrt", std::move(out), {x}, [x, y = std::move(y)](Tape<T>& t, const Array<T>& g) {
        auto gx = t.grad_buffer(x.id()).data();
        for (std::size_t i = 0; i < gx.size(); ++i) {
            if (y[i] > T(0)) gx[i] += g[i] / (T(2) * y[i]);
        }
    });
}

template <typename T>
Var<T> div_scalar(const Var<T>& x, const Var<T>& s, double eps) {
    if (s.value().size() != 1) shape_fail("div_scalar", x.shape(), s.shape());
    const T sv = s.value()[0];
    const bool active = sv > static_cast<T>(eps);
    Array<T> out(x.shape());
    if (active) {
        auto xv = x.value().data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] / sv;
    }
    return x.tape().record("div_scalar", std::move(out), {x, s}, [x, s, sv, active](Tape<T>& t, const Array<T>& g) {
        if (!active) return;
        auto xv = x.value().data();
        if (wants_grad(x)) {
            auto gx = t.grad_buffer(x.id()).data();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] / sv;
        }
        if (wants_grad(s)) {
            T acc = 0;
            for (std::size_t i = 0; i < xv.size(); ++i) acc += g[i] * xv[i];
            t.grad_buffer(s.id())[0] -= acc / (sv * sv);
        }
    });
}

template <typename T>
Var<T> huber(const Var<T>& a, const Var<T>& b, double delta) {
    require_same("huber", a, b);
    const T dl = static_cast<T>(delta);
    Array<T> out(a.shape());
    Array<T> slope(a.shape());
    auto av = a.value().data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T d = av[i] - bv[i];
        const T ad = std::abs(d);
        if (ad <= dl) {
            out[i] = T(0.5) * d * d;
            slope[i] = d;
        } else {
            out[i] = dl * (ad - T(0.5) * dl);
            slope[i] = d > 0 ? dl : -dl;
        }
    }
    return a.tape().record("huber", std::move(out), {a, b}, [a, b, slope = std::move(slope)](Tape<T>& t, const Array<T>& g) {
        if (wants_grad(a)) {
            auto ga = t.grad_buffer(a.id()).data();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * slope[i];
        }
        if (wants_grad(b)) {
            auto gb = t.grad_buffer(b.id()).data();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i] * slope[i];
        }
    });
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> rows) {
    if (x.shape().empty()) rank_fail("gather_rows", x.shape(), "rank >= 1");
    const std::size_t n = x.shape()[0];
    const std::size_t width = n == 0 ? 0 : x.value().size() / n;
    Shape s = x.shape();
    s[0] = rows.size();
    Array<T> out(s);
    auto xv = x.value().data();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= n) {
            throw ShapeError("gather_rows: row " + std::to_string(rows[r]) + " out of range for " + shape_str(x.shape()));
        }
        std::copy_n(xv.data() + rows[r] * width, width, out.data().data() + r * width);
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return x.tape().record("gather_rows", std::move(out), {x}, [x, idx = std::move(idx), width](Tape<T>& t, const Array<T>& g) {
        auto gx = t.grad_buffer(x.id()).data();
        for (std::size_t r = 0; r < idx.size(); ++r) {
            for (std::size_t j = 0; j < width; ++j) gx[idx[r] * width + j] += g[r * width + j];
        }
    });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    Shape s = parts.front().shape();
    if (s.empty()) rank_fail("concat_rows", s, "rank >= 1");
    std::size_t rows = 0;
    for (const auto& p : parts) {
        const Shape& ps = p.shape();
        if (ps.size() != s.size() || !std::equal(ps.begin() + 1, ps.end(), s.begin() + 1)) shape_fail("concat_rows", s, ps);
        rows += ps[0];
    }
    s[0] = rows;
    Array<T> out(s);
    std::size_t off = 0;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(off);
        std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + off);
        off += p.value().size();
    }
    return parts.front().tape().record("concat_rows", std::move(out), parts,
                                       [parts, offsets](Tape<T>& t, const Array<T>& g) {
                                           for (std::size_t k = 0; k < parts.size(); ++k) {
                                               if (!wants_grad(parts[k])) continue;
                                               auto gp = t.grad_buffer(parts[k].id()).data();
                                               for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] + i];
                                           }
                                       });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t end) {
    if (x.shape().empty()) rank_fail("slice_rows", x.shape(), "rank >= 1");
    const std::size_t n = x.shape()[0];
    if (begin > end || end > n) {
        throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                         shape_str(x.shape()));
    }
    const std::size_t width = n == 0 ? 0 : x.value().size() / n;
    Shape s = x.shape();
    s[0] = end - begin;
    Array<T> out(s);
    auto xv = x.value().data();
    std::copy(xv.begin() + begin * width, xv.begin() + end * width, out.data().begin());
    return x.tape().record("slice_rows", std::move(out), {x}, [x, begin, width](Tape<T>& t, const Array<T>& g) {
        auto gx = t.grad_buffer(x.id()).data();
        for (std::size_t i = 0; i < g.size(); ++i) gx[begin * width + i] += g[i];
    });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t rows = parts.front().shape().at(0);
    std::size_t cols = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        if (p.shape().size() != 2 || p.shape()[0] != rows) shape_fail("concat_cols", parts.front().shape(), p.shape());
        widths.push_back(p.shape()[1]);
        cols += p.shape()[1];
    }
    Array<T> out({rows, cols});
    std::size_t c0 = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        auto pv = parts[k].value().data();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(pv.data() + r * widths[k], widths[k], out.data().data() + r * cols + c0);
        }
        c0 += widths[k];
    }
    return parts.front().tape().record("concat_cols", std::move(out), parts,
                                       [parts, widths, rows, cols](Tape<T>& t, const Array<T>& g) {
                                           std::size_t c0 = 0;
                                           for (std::size_t k = 0; k < parts.size(); ++k) {
                                               if (wants_grad(parts[k])) {
                                                   auto gp = t.grad_buffer(parts[k].id()).data();
                                                   for (std::size_t r = 0; r < rows; ++r) {
                                                       for (std::size_t j = 0; j < widths[k]; ++j) {
                                                           gp[r * widths[k] + j] += g[r * cols + c0 + j];
                                                       }
                                                   }
                                               }
                                               c0 += widths[k];
                                           }
                                       });
}

template <typename T>
Var<T> pick(const Var<T>& x, std::span<const std::size_t> index) {
    require_rank("pick", x, 2, "rank 2");
    const std::size_t n = x.shape()[0], k = x.shape()[1];
    if (index.size() != n) shape_fail("pick", x.shape(), Shape{index.size()});
    Array<T> out({n});
    for (std::size_t i = 0; i < n; ++i) {
        if (index[i] >= k) {
            throw ShapeError("pick: index " + std::to_string(index[i]) + " out of range for " + shape_str(x.shape()));
        }
        out[i] = x.value()[i * k + index[i]];
    }
    std::vector<std::size_t> idx(index.begin(), index.end());
    return x.tape().record("pick", std::move(out), {x}, [x, idx = std::move(idx), k](Tape<T>& t, const Array<T>& g) {
        auto gx = t.grad_buffer(x.id()).data();
        for (std::size_t i = 0; i < idx.size(); ++i) gx[i * k + idx[i]] += g[i];
    });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Array<T> out = x.value().reshaped(std::move(shape));
    return x.tape().record("reshape", std::move(out), {x}, [x](Tape<T>& t, const Array<T>& g) {
        auto gx = t.grad_buffer(x.id()).data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
}

#define FEVER_INSTANTIATE_OPS(T)                                                                                 \
    template Var<T> add(const Var<T>&, const Var<T>&);                                                          \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                                          \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                                          \
    template Var<T> scale(const Var<T>&, T);                                                                     \
    template Var<T> add_scalar(const Var<T>&, T);                                                                \
    template Var<T> relu(const Var<T>&);                                                                         \
    template Var<T> add_bias(const Var<T>&, const Var<T>&);                                                     \
    template Var<T> matmul(const Var<T>&, const Var<T>&);                                                       \
    template Var<T> transpose(const Var<T>&);                                                                    \
    template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                        \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, std::size_t, Padding);                                 \
    template Var<T> batchnorm2d(const Var<T>&, const Var<T>&, const Var<T>&, Array<T>&, Array<T>&, T, T);        \
    template Var<T> global_avg_pool(const Var<T>&);                                                              \
    template Var<T> dropout(const Var<T>&, double, Rng&);                                                       \
    template Var<T> l2_normalize(const Var<T>&, double);                                                        \
    template Var<T> softmax(const Var<T>&);                                                                      \
    template Var<T> log_softmax(const Var<T>&);                                                                  \
    template Var<T> sum(const Var<T>&);                                                                          \
    template Var<T> mean(const Var<T>&);                                                                         \
    template Var<T> sum_last(const Var<T>&);                                                                     \
    template Var<T> pairwise_sq_dist(const Var<T>&);                                                             \
    template Var<T> pairwise_diff(const Var<T>&);                                                                \
    template Var<T> bmm_nt(const Var<T>&, const Var<T>&);                                                       \
    template Var<T> safe_sqrt(const Var<T>&, double);                                                           \
    template Var<T> div_scalar(const Var<T>&, const Var<T>&, double);                                           \
    template Var<T> huber(const Var<T>&, const Var<T>&, double);                                                \
    template Var<T> gather_rows(const Var<T>&, std::span<const std::size_t>);                                   \
    template Var<T> concat_rows(const std::vector<Var<T>>&);                                                    \
    template Var<T> slice_rows(const Var<T>&, std::size_t, std::size_t);                                        \
    template Var<T> concat_cols(const std::vector<Var<T>>&);                                                    \
    template Var<T> pick(const Var<T>&, std::span<const std::size_t>);                                          \
    template Var<T> reshape(const Var<T>&, Shape);

FEVER_INSTANTIATE_OPS(float)
FEVER_INSTANTIATE_OPS(double)

}  // namespace fever::ndgrad
