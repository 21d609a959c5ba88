#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>

#include "img2st/tensor.hpp"

namespace img2st {

// Per-parameter gradient tensors keyed by parameter name. std::map keeps
// iteration order deterministic for reductions and optimizer updates.
template <typename S>
using LayerGradients = std::map<std::string, Tensor<S>>;

namespace detail {

// Valid output range [lo, hi) such that 0 <= o*stride + k - pad < extent.
inline std::pair<int, int> conv_span(int out_extent, int in_extent, int k, int stride, int pad) {
    int lo = 0;
    const int num = pad - k;
    if (num > 0) lo = (num + stride - 1) / stride;
    int hi = out_extent;
    const int max_i = in_extent - 1 - k + pad;  // largest o*stride allowed
    if (max_i < 0) {
        hi = lo;  // empty
    } else {
        hi = std::min(out_extent, max_i / stride + 1);
    }
    return {lo, hi};
}

template <typename S>
void require_4d(const Tensor<S>& t, const char* what) {
    if (t.ndim() != 4) throw std::invalid_argument(std::string(what) + " must have 4 axes, got " + t.shape_str());
}

}  // namespace detail

// Cross-correlation (no kernel flip), NCHW input, OIHW weight.
template <typename S>
Tensor<S> conv2d_forward(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                         int stride, int padding) {
    detail::require_4d(input, "conv2d input");
    detail::require_4d(weight, "conv2d weight");
    if (stride < 1) throw std::invalid_argument("conv2d stride must be >= 1");
    if (padding < 0) throw std::invalid_argument("conv2d padding must be >= 0");
    const int n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != ci) {
        throw std::invalid_argument("conv2d channel mismatch: input has " + std::to_string(ci) +
                                    " channels, weight expects " + std::to_string(weight.dim(1)));
    }
    if (bias.ndim() != 1 || bias.dim(0) != co) {
        throw std::invalid_argument("conv2d bias must have shape [" + std::to_string(co) + "]");
    }
    const int ho = (h + 2 * padding - kh) / stride + 1;
    const int wo = (w + 2 * padding - kw) / stride + 1;
    if (h + 2 * padding < kh || w + 2 * padding < kw || ho <= 0 || wo <= 0) {
        throw std::invalid_argument("conv2d output is empty for input " + input.shape_str() +
                                    ", kernel " + weight.shape_str());
    }

    Tensor<S> out({n, co, ho, wo});
    const S* in = input.ptr();
    const S* wp = weight.ptr();
    S* op = out.ptr();
    const std::int64_t in_cs = static_cast<std::int64_t>(h) * w;
    const std::int64_t out_cs = static_cast<std::int64_t>(ho) * wo;

    for (int b = 0; b < n; ++b) {
        const S* in_b = in + static_cast<std::int64_t>(b) * ci * in_cs;
        S* out_b = op + static_cast<std::int64_t>(b) * co * out_cs;
        for (int oc = 0; oc < co; ++oc) {
            const S bias_v = bias.at(oc);
            S* out_c = out_b + oc * out_cs;
            std::fill(out_c, out_c + out_cs, bias_v);
        }
        for (int ic = 0; ic < ci; ++ic) {
            const S* in_c = in_b + ic * in_cs;
            for (int oc = 0; oc < co; ++oc) {
                S* out_c = out_b + oc * out_cs;
                const S* w_oc = wp + (static_cast<std::int64_t>(oc) * ci + ic) * kh * kw;
                for (int fy = 0; fy < kh; ++fy) {
                    const auto [oh_lo, oh_hi] = detail::conv_span(ho, h, fy, stride, padding);
                    for (int fx = 0; fx < kw; ++fx) {
                        const S wv = w_oc[fy * kw + fx];
                        const auto [ow_lo, ow_hi] = detail::conv_span(wo, w, fx, stride, padding);
                        for (int oh = oh_lo; oh < oh_hi; ++oh) {
                            const int ih = oh * stride + fy - padding;
                            const S* in_row = in_c + static_cast<std::int64_t>(ih) * w;
                            S* out_row = out_c + static_cast<std::int64_t>(oh) * wo;
                            if (stride == 1) {
                                const S* in_s = in_row + fx - padding;
                                for (int ow = ow_lo; ow < ow_hi; ++ow) out_row[ow] += wv * in_s[ow];
                            } else {
                                for (int ow = ow_lo; ow < ow_hi; ++ow) {
                                    out_row[ow] += wv * in_row[ow * stride + fx - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <typename S>
struct Conv2dGrads {
    Tensor<S> input;
    Tensor<S> weight;
    Tensor<S> bias;
};

template <typename S>
Conv2dGrads<S> conv2d_backward(const Tensor<S>& input, const Tensor<S>& weight,
                               const Tensor<S>& upstream, int stride, int padding) {
    detail::require_4d(input, "conv2d input");
    detail::require_4d(weight, "conv2d weight");
    detail::require_4d(upstream, "conv2d upstream");
    const int n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    const int ho = (h + 2 * padding - kh) / stride + 1;
    const int wo = (w + 2 * padding - kw) / stride + 1;
    if (upstream.dim(0) != n || upstream.dim(1) != co || upstream.dim(2) != ho || upstream.dim(3) != wo) {
        throw std::invalid_argument("conv2d upstream shape " + upstream.shape_str() +
                                    " does not match forward output [" + std::to_string(n) + "x" +
                                    std::to_string(co) + "x" + std::to_string(ho) + "x" + std::to_string(wo) + "]");
    }

    Conv2dGrads<S> g{Tensor<S>(input.shape), Tensor<S>(weight.shape), Tensor<S>({co})};
    const S* in = input.ptr();
    const S* wp = weight.ptr();
    const S* gy = upstream.ptr();
    const std::int64_t in_cs = static_cast<std::int64_t>(h) * w;
    const std::int64_t out_cs = static_cast<std::int64_t>(ho) * wo;

    for (int b = 0; b < n; ++b) {
        const S* in_b = in + static_cast<std::int64_t>(b) * ci * in_cs;
        const S* gy_b = gy + static_cast<std::int64_t>(b) * co * out_cs;
        S* gx_b = g.input.ptr() + static_cast<std::int64_t>(b) * ci * in_cs;
        for (int oc = 0; oc < co; ++oc) {
            const S* gy_c = gy_b + oc * out_cs;
            S acc = S(0);
            for (std::int64_t i = 0; i < out_cs; ++i) acc += gy_c[i];
            g.bias.at(oc) += acc;
            for (int ic = 0; ic < ci; ++ic) {
                const S* in_c = in_b + ic * in_cs;
                S* gx_c = gx_b + ic * in_cs;
                const S* w_oc = wp + (static_cast<std::int64_t>(oc) * ci + ic) * kh * kw;
                S* gw_oc = g.weight.ptr() + (static_cast<std::int64_t>(oc) * ci + ic) * kh * kw;
                for (int fy = 0; fy < kh; ++fy) {
                    const auto [oh_lo, oh_hi] = detail::conv_span(ho, h, fy, stride, padding);
                    for (int fx = 0; fx < kw; ++fx) {
                        const S wv = w_oc[fy * kw + fx];
                        S gw_acc = S(0);
                        const auto [ow_lo, ow_hi] = detail::conv_span(wo, w, fx, stride, padding);
                        for (int oh = oh_lo; oh < oh_hi; ++oh) {
                            const int ih = oh * stride + fy - padding;
                            const S* in_row = in_c + static_cast<std::int64_t>(ih) * w;
                            S* gx_row = gx_c + static_cast<std::int64_t>(ih) * w;
                            const S* gy_row = gy_c + static_cast<std::int64_t>(oh) * wo;
                            for (int ow = ow_lo; ow < ow_hi; ++ow) {
                                const int iw = ow * stride + fx - padding;
                                const S gv = gy_row[ow];
                                gx_row[iw] += wv * gv;
                                gw_acc += in_row[iw] * gv;
                            }
                        }
                        gw_oc[fy * kw + fx] += gw_acc;
                    }
                }
            }
        }
    }
    return g;
}

template <typename S>
struct MaxPool2x2Result {
    Tensor<S> out;
    std::vector<std::int64_t> argmax;  // flat input index per output element
    std::vector<int> in_shape;
};

template <typename S>
MaxPool2x2Result<S> maxpool2x2_forward(const Tensor<S>& input) {
    detail::require_4d(input, "maxpool input");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (h % 2 != 0 || w % 2 != 0) {
        throw std::invalid_argument("maxpool2x2 requires even spatial extents, got " + input.shape_str());
    }
    MaxPool2x2Result<S> r;
    r.in_shape = input.shape;
    r.out = Tensor<S>({n, c, h / 2, w / 2});
    r.argmax.resize(static_cast<std::size_t>(r.out.numel()));
    const S* in = input.ptr();
    S* op = r.out.ptr();
    std::size_t oi = 0;
    for (int b = 0; b < n; ++b) {
        for (int ch = 0; ch < c; ++ch) {
            const std::int64_t base = (static_cast<std::int64_t>(b) * c + ch) * h * w;
            for (int y = 0; y < h; y += 2) {
                for (int x = 0; x < w; x += 2) {
                    std::int64_t best = base + static_cast<std::int64_t>(y) * w + x;
                    S bv = in[best];
                    const std::int64_t cand[3] = {best + 1, best + w, best + w + 1};
                    for (std::int64_t idx : cand) {
                        if (in[idx] > bv) {
                            bv = in[idx];
                            best = idx;
                        }
                    }
                    op[oi] = bv;
                    r.argmax[oi] = best;
                    ++oi;
                }
            }
        }
    }
    return r;
}

template <typename S>
Tensor<S> maxpool2x2_backward(const MaxPool2x2Result<S>& fwd, const Tensor<S>& upstream) {
    if (upstream.shape != fwd.out.shape) {
        throw std::invalid_argument("maxpool upstream shape " + upstream.shape_str() + " != pooled shape");
    }
    Tensor<S> gx(fwd.in_shape);
    for (std::size_t i = 0; i < fwd.argmax.size(); ++i) {
        gx.data[static_cast<std::size_t>(fwd.argmax[i])] += upstream.data[i];
    }
    return gx;
}

namespace detail {

// Half-pixel source coordinate for 2x upsampling; returns (i0, i1, frac).
inline void bilinear_taps(int out_i, int in_extent, int& i0, int& i1, double& f) {
    const double src = (out_i + 0.5) / 2.0 - 0.5;
    double fl = std::floor(src);
    f = src - fl;
    i0 = static_cast<int>(fl);
    i1 = i0 + 1;
    i0 = std::clamp(i0, 0, in_extent - 1);
    i1 = std::clamp(i1, 0, in_extent - 1);
}

}  // namespace detail

template <typename S>
Tensor<S> upsample_bilinear2x_forward(const Tensor<S>& input) {
    detail::require_4d(input, "upsample input");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    Tensor<S> out({n, c, 2 * h, 2 * w});
    for (int b = 0; b < n; ++b) {
        for (int ch = 0; ch < c; ++ch) {
            for (int y = 0; y < 2 * h; ++y) {
                int y0, y1;
                double fy;
                detail::bilinear_taps(y, h, y0, y1, fy);
                for (int x = 0; x < 2 * w; ++x) {
                    int x0, x1;
                    double fx;
                    detail::bilinear_taps(x, w, x0, x1, fx);
                    const auto v = (1.0 - fy) * ((1.0 - fx) * input.at(b, ch, y0, x0) + fx * input.at(b, ch, y0, x1)) +
                                   fy * ((1.0 - fx) * input.at(b, ch, y1, x0) + fx * input.at(b, ch, y1, x1));
                    out.at(b, ch, y, x) = static_cast<S>(v);
                }
            }
        }
    }
    return out;
}

template <typename S>
Tensor<S> upsample_bilinear2x_backward(const Tensor<S>& upstream, int in_h, int in_w) {
    detail::require_4d(upstream, "upsample upstream");
    const int n = upstream.dim(0), c = upstream.dim(1);
    if (upstream.dim(2) != 2 * in_h || upstream.dim(3) != 2 * in_w) {
        throw std::invalid_argument("upsample upstream shape " + upstream.shape_str() +
                                    " does not match 2x of input extents");
    }
    Tensor<S> gx({n, c, in_h, in_w});
    for (int b = 0; b < n; ++b) {
        for (int ch = 0; ch < c; ++ch) {
            for (int y = 0; y < 2 * in_h; ++y) {
                int y0, y1;
                double fy;
                detail::bilinear_taps(y, in_h, y0, y1, fy);
                for (int x = 0; x < 2 * in_w; ++x) {
                    int x0, x1;
                    double fx;
                    detail::bilinear_taps(x, in_w, x0, x1, fx);
                    const double g = static_cast<double>(upstream.at(b, ch, y, x));
                    gx.at(b, ch, y0, x0) += static_cast<S>((1.0 - fy) * (1.0 - fx) * g);
                    gx.at(b, ch, y0, x1) += static_cast<S>((1.0 - fy) * fx * g);
                    gx.at(b, ch, y1, x0) += static_cast<S>(fy * (1.0 - fx) * g);
                    gx.at(b, ch, y1, x1) += static_cast<S>(fy * fx * g);
                }
            }
        }
    }
    return gx;
}

template <typename S>
Tensor<S> relu_forward(const Tensor<S>& input) {
    Tensor<S> out;
    out.shape = input.shape;
    out.data.resize(input.data.size());
    for (std::size_t i = 0; i < input.data.size(); ++i) {
        out.data[i] = input.data[i] > S(0) ? input.data[i] : S(0);
    }
    return out;
}

// Subgradient 0 at exactly 0.
template <typename S>
Tensor<S> relu_backward(const Tensor<S>& input, const Tensor<S>& upstream) {
    if (!input.same_shape(upstream)) {
        throw std::invalid_argument("relu upstream shape mismatch");
    }
    Tensor<S> gx;
    gx.shape = input.shape;
    gx.data.resize(input.data.size());
    for (std::size_t i = 0; i < input.data.size(); ++i) {
        gx.data[i] = input.data[i] > S(0) ? upstream.data[i] : S(0);
    }
    return gx;
}

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_4d(a, "concat lhs");
    detail::require_4d(b, "concat rhs");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
        throw std::invalid_argument("concat_channels non-channel extents differ: " + a.shape_str() +
                                    " vs " + b.shape_str());
    }
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
    Tensor<S> out({n, ca + cb, h, w});
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (int bn = 0; bn < n; ++bn) {
        S* dst = out.ptr() + static_cast<std::int64_t>(bn) * (ca + cb) * plane;
        std::copy_n(a.ptr() + static_cast<std::int64_t>(bn) * ca * plane, ca * plane, dst);
        std::copy_n(b.ptr() + static_cast<std::int64_t>(bn) * cb * plane, cb * plane, dst + ca * plane);
    }
    return out;
}

template <typename S>
Tensor<S> slice_channels(const Tensor<S>& x, int c0, int c1) {
    detail::require_4d(x, "slice input");
    if (c0 < 0 || c1 > x.dim(1) || c0 >= c1) throw std::invalid_argument("bad channel slice");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<S> out({n, c1 - c0, h, w});
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (int bn = 0; bn < n; ++bn) {
        std::copy_n(x.ptr() + (static_cast<std::int64_t>(bn) * c + c0) * plane, (c1 - c0) * plane,
                    out.ptr() + static_cast<std::int64_t>(bn) * (c1 - c0) * plane);
    }
    return out;
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> concat_channels_backward(const Tensor<S>& upstream, int ca) {
    return {slice_channels(upstream, 0, ca), slice_channels(upstream, ca, upstream.dim(1))};
}

// x: (M, In), w: (Out, In), b: (Out) -> (M, Out)
template <typename S>
Tensor<S> linear_forward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    if (x.ndim() != 2 || w.ndim() != 2) throw std::invalid_argument("linear expects 2-axis tensors");
    const int m = x.dim(0), in = x.dim(1), out = w.dim(0);
    if (w.dim(1) != in) {
        throw std::invalid_argument("linear weight " + w.shape_str() + " incompatible with input " + x.shape_str());
    }
    if (b.ndim() != 1 || b.dim(0) != out) throw std::invalid_argument("linear bias shape mismatch");
    Tensor<S> y({m, out});
    for (int i = 0; i < m; ++i) {
        const S* xr = x.ptr() + static_cast<std::int64_t>(i) * in;
        S* yr = y.ptr() + static_cast<std::int64_t>(i) * out;
        for (int o = 0; o < out; ++o) {
            const S* wr = w.ptr() + static_cast<std::int64_t>(o) * in;
            S acc = b.at(o);
            for (int k = 0; k < in; ++k) acc += wr[k] * xr[k];
            yr[o] = acc;
        }
    }
    return y;
}

template <typename S>
struct LinearGrads {
    Tensor<S> input;
    Tensor<S> weight;
    Tensor<S> bias;
};

template <typename S>
LinearGrads<S> linear_backward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& upstream) {
    const int m = x.dim(0), in = x.dim(1), out = w.dim(0);
    if (upstream.ndim() != 2 || upstream.dim(0) != m || upstream.dim(1) != out) {
        throw std::invalid_argument("linear upstream shape mismatch");
    }
    LinearGrads<S> g{Tensor<S>(x.shape), Tensor<S>(w.shape), Tensor<S>({out})};
    for (int i = 0; i < m; ++i) {
        const S* xr = x.ptr() + static_cast<std::int64_t>(i) * in;
        const S* gr = upstream.ptr() + static_cast<std::int64_t>(i) * out;
        S* gxr = g.input.ptr() + static_cast<std::int64_t>(i) * in;
        for (int o = 0; o < out; ++o) {
            const S gv = gr[o];
            g.bias.at(o) += gv;
            const S* wr = w.ptr() + static_cast<std::int64_t>(o) * in;
            S* gwr = g.weight.ptr() + static_cast<std::int64_t>(o) * in;
            for (int k = 0; k < in; ++k) {
                gxr[k] += gv * wr[k];
                gwr[k] += gv * xr[k];
            }
        }
    }
    return g;
}

template <typename S>
Tensor<S> global_avg_pool_forward(const Tensor<S>& x) {
    detail::require_4d(x, "global pool input");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<S> y({n, c});
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (int b = 0; b < n; ++b) {
        for (int ch = 0; ch < c; ++ch) {
            const S* p = x.ptr() + (static_cast<std::int64_t>(b) * c + ch) * plane;
            S acc = S(0);
            for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
            y.at(b, ch) = acc / static_cast<S>(plane);
        }
    }
    return y;
}

template <typename S>
Tensor<S> global_avg_pool_backward(const Tensor<S>& upstream, int h, int w) {
    const int n = upstream.dim(0), c = upstream.dim(1);
    Tensor<S> gx({n, c, h, w});
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (int b = 0; b < n; ++b) {
        for (int ch = 0; ch < c; ++ch) {
            const S g = upstream.at(b, ch) / static_cast<S>(plane);
            S* p = gx.ptr() + (static_cast<std::int64_t>(b) * c + ch) * plane;
            std::fill(p, p + plane, g);
        }
    }
    return gx;
}

}  // namespace img2st
