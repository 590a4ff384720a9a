#include "whittle/ops.hpp"

#include <cmath>
#include <cstddef>

namespace whittle::ndgrad {

namespace {

using detail::fail;
using detail::make_result;
using detail::shape_str;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
    }
}

// Adds a double-precision buffer into a float gradient field.
void accumulate(TensorImpl& t, const std::vector<double>& buf) {
    t.ensure_grad();
    for (size_t i = 0; i < buf.size(); ++i) t.grad[i] += static_cast<float>(buf[i]);
}

void set_mirror(Tensor& t, double v) {
    if (!std::isfinite(v)) fail("scalar result is non-finite");
    t.impl()->scalar64 = v;
}

// 64-bit view of a 1-element tensor, if one was recorded.
bool mirror_of(const Tensor& t, double& out) {
    if (t.numel() == 1 && t.impl()->scalar64) {
        out = *t.impl()->scalar64;
        return true;
    }
    return false;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<float> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    auto ai = a.impl(), bi = b.impl();
    Tensor r = make_result(a.shape(), std::move(out), {a, b}, "add", [ai, bi](TensorImpl& o) {
        if (ai->requires_grad) {
            ai->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i];
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) bi->grad[i] += o.grad[i];
        }
    });
    double ma, mb;
    if (mirror_of(a, ma) && mirror_of(b, mb)) set_mirror(r, ma + mb);
    return r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<float> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    auto ai = a.impl(), bi = b.impl();
    Tensor r = make_result(a.shape(), std::move(out), {a, b}, "sub", [ai, bi](TensorImpl& o) {
        if (ai->requires_grad) {
            ai->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i];
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) bi->grad[i] -= o.grad[i];
        }
    });
    double ma, mb;
    if (mirror_of(a, ma) && mirror_of(b, mb)) set_mirror(r, ma - mb);
    return r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<float> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    auto ai = a.impl(), bi = b.impl();
    Tensor r = make_result(a.shape(), std::move(out), {a, b}, "mul", [ai, bi](TensorImpl& o) {
        if (ai->requires_grad) {
            ai->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i] * bi->data[i];
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) bi->grad[i] += o.grad[i] * ai->data[i];
        }
    });
    double ma, mb;
    if (mirror_of(a, ma) && mirror_of(b, mb)) set_mirror(r, ma * mb);
    return r;
}

Tensor scalar_mul(const Tensor& x, double c) {
    std::vector<float> out(x.data().size());
    const float cf = static_cast<float>(c);
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) * cf;
    auto xi = x.impl();
    Tensor r = make_result(x.shape(), std::move(out), {x}, "scalar_mul", [xi, cf](TensorImpl& o) {
        xi->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) xi->grad[i] += o.grad[i] * cf;
    });
    double m;
    if (mirror_of(x, m)) set_mirror(r, m * c);
    return r;
}

Tensor scalar_add(const Tensor& x, double c) {
    std::vector<float> out(x.data().size());
    const float cf = static_cast<float>(c);
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) + cf;
    auto xi = x.impl();
    Tensor r = make_result(x.shape(), std::move(out), {x}, "scalar_add", [xi](TensorImpl& o) {
        xi->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) xi->grad[i] += o.grad[i];
    });
    double m;
    if (mirror_of(x, m)) set_mirror(r, m + c);
    return r;
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    auto xi = x.impl();
    Tensor r = make_result({1}, {static_cast<float>(acc)}, {x}, "sum", [xi](TensorImpl& o) {
        xi->ensure_grad();
        const float g = o.grad[0];
        for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += g;
    });
    set_mirror(r, acc);
    return r;
}

Tensor mean(const Tensor& x) { return scalar_mul(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor reshape(const Tensor& x, std::vector<int64_t> new_shape) {
    int64_t n = 1;
    for (int64_t d : new_shape) n *= d;
    if (n != x.numel()) {
        fail("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    }
    auto xi = x.impl();
    return make_result(std::move(new_shape), x.data(), {x}, "reshape", [xi](TensorImpl& o) {
        xi->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) xi->grad[i] += o.grad[i];
    });
}

Tensor relu(const Tensor& x) {
    std::vector<float> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) > 0.0f ? x.at(i) : 0.0f;
    auto xi = x.impl();
    return make_result(x.shape(), std::move(out), {x}, "relu", [xi](TensorImpl& o) {
        xi->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            if (xi->data[i] > 0.0f) xi->grad[i] += o.grad[i];
        }
    });
}

Tensor map_unary(const Tensor& x, const std::function<double(double)>& f,
                 const std::function<double(double)>& dfdx, const char* name) {
    std::vector<float> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<float>(f(static_cast<double>(x.at(i))));
    }
    auto xi = x.impl();
    return make_result(x.shape(), std::move(out), {x}, name, [xi, dfdx](TensorImpl& o) {
        std::vector<double> gx(xi->data.size(), 0.0);
        for (size_t i = 0; i < o.grad.size(); ++i) {
            gx[i] = static_cast<double>(o.grad[i]) * dfdx(static_cast<double>(xi->data[i]));
        }
        accumulate(*xi, gx);
    });
}

Tensor conv2d(const Tensor& input, const Tensor& weight, int stride, int padding) {
    if (input.ndim() != 4 || weight.ndim() != 4) {
        fail("conv2d: expected 4-d input and weight, got " + shape_str(input.shape()) + " and " +
             shape_str(weight.shape()));
    }
    if (stride < 1) fail("conv2d: stride must be positive");
    if (padding < 0) fail("conv2d: padding must be non-negative");
    const int64_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int64_t Cout = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != Cin) {
        fail("conv2d: weight expects " + std::to_string(weight.dim(1)) + " input channels, input has " +
             std::to_string(Cin));
    }
    if (weight.dim(2) != weight.dim(3)) fail("conv2d: only square kernels are supported");
    if (k > H + 2 * padding || k > W + 2 * padding) {
        fail("conv2d: kernel " + std::to_string(k) + " exceeds padded input " +
             shape_str(input.shape()));
    }
    const int64_t Ho = (H + 2 * padding - k) / stride + 1;
    const int64_t Wo = (W + 2 * padding - k) / stride + 1;

    const float* xd = input.data().data();
    const float* wd = weight.data().data();
    std::vector<float> out(static_cast<size_t>(N * Cout * Ho * Wo));
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t oc = 0; oc < Cout; ++oc) {
            for (int64_t oh = 0; oh < Ho; ++oh) {
                for (int64_t ow = 0; ow < Wo; ++ow) {
                    double acc = 0.0;
                    for (int64_t ic = 0; ic < Cin; ++ic) {
                        for (int64_t kh = 0; kh < k; ++kh) {
                            const int64_t ih = oh * stride - padding + kh;
                            if (ih < 0 || ih >= H) continue;
                            for (int64_t kw = 0; kw < k; ++kw) {
                                const int64_t iw = ow * stride - padding + kw;
                                if (iw < 0 || iw >= W) continue;
                                acc += static_cast<double>(xd[((n * Cin + ic) * H + ih) * W + iw]) *
                                       static_cast<double>(wd[((oc * Cin + ic) * k + kh) * k + kw]);
                            }
                        }
                    }
                    out[((n * Cout + oc) * Ho + oh) * Wo + ow] = static_cast<float>(acc);
                }
            }
        }
    }

    auto xi = input.impl();
    auto wi = weight.impl();
    return make_result({N, Cout, Ho, Wo}, std::move(out), {input, weight}, "conv2d",
                       [xi, wi, N, Cin, H, W, Cout, k, Ho, Wo, stride, padding](TensorImpl& o) {
        const bool need_x = xi->requires_grad;
        const bool need_w = wi->requires_grad;
        std::vector<double> gx(need_x ? xi->data.size() : 0, 0.0);
        std::vector<double> gw(need_w ? wi->data.size() : 0, 0.0);
        const float* xd = xi->data.data();
        const float* wd = wi->data.data();
        for (int64_t n = 0; n < N; ++n) {
            for (int64_t oc = 0; oc < Cout; ++oc) {
                for (int64_t oh = 0; oh < Ho; ++oh) {
                    for (int64_t ow = 0; ow < Wo; ++ow) {
                        const double g = o.grad[((n * Cout + oc) * Ho + oh) * Wo + ow];
                        if (g == 0.0) continue;
                        for (int64_t ic = 0; ic < Cin; ++ic) {
                            for (int64_t kh = 0; kh < k; ++kh) {
                                const int64_t ih = oh * stride - padding + kh;
                                if (ih < 0 || ih >= H) continue;
                                for (int64_t kw = 0; kw < k; ++kw) {
                                    const int64_t iw = ow * stride - padding + kw;
                                    if (iw < 0 || iw >= W) continue;
                                    const size_t xoff = ((n * Cin + ic) * H + ih) * W + iw;
                                    const size_t woff = ((oc * Cin + ic) * k + kh) * k + kw;
                                    if (need_w) gw[woff] += g * xd[xoff];
                                    if (need_x) gx[xoff] += g * wd[woff];
                                }
                            }
                        }
                    }
                }
            }
        }
        if (need_x) accumulate(*xi, gx);
        if (need_w) accumulate(*wi, gw);
    });
}

Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 Tensor running_mean, Tensor running_var, bool training, double momentum,
                 double eps) {
    if (input.ndim() != 2 && input.ndim() != 4) {
        fail("batchnorm: expected [N,C] or [N,C,H,W], got " + shape_str(input.shape()));
    }
    const int64_t N = input.dim(0), C = input.dim(1);
    const int64_t S = input.ndim() == 4 ? input.dim(2) * input.dim(3) : 1;
    if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
        running_var.numel() != C) {
        fail("batchnorm: parameter length does not match " + std::to_string(C) + " channels");
    }
    const int64_t M = N * S;
    if (training && M < 2) fail("batchnorm: training needs at least 2 values per channel");

    const float* xd = input.data().data();
    std::vector<double> mu(C), invstd(C);
    if (training) {
        for (int64_t c = 0; c < C; ++c) {
            double m = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const float* row = xd + (n * C + c) * S;
                for (int64_t s = 0; s < S; ++s) m += row[s];
            }
            m /= static_cast<double>(M);
            double v = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const float* row = xd + (n * C + c) * S;
                for (int64_t s = 0; s < S; ++s) {
                    const double d = row[s] - m;
                    v += d * d;
                }
            }
            v /= static_cast<double>(M);
            mu[c] = m;
            invstd[c] = 1.0 / std::sqrt(v + eps);
            const double unbiased = v * static_cast<double>(M) / static_cast<double>(M - 1);
            auto& rm = running_mean.data();
            auto& rv = running_var.data();
            rm[c] = static_cast<float>((1.0 - momentum) * rm[c] + momentum * m);
            rv[c] = static_cast<float>((1.0 - momentum) * rv[c] + momentum * unbiased);
        }
    } else {
        for (int64_t c = 0; c < C; ++c) {
            mu[c] = running_mean.at(c);
            invstd[c] = 1.0 / std::sqrt(static_cast<double>(running_var.at(c)) + eps);
        }
    }

    std::vector<float> out(input.data().size());
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            const double g = gamma.at(c), b = beta.at(c);
            const size_t base = (n * C + c) * S;
            for (int64_t s = 0; s < S; ++s) {
                out[base + s] =
                    static_cast<float>((xd[base + s] - mu[c]) * invstd[c] * g + b);
            }
        }
    }

    auto xi = input.impl();
    auto gi = gamma.impl();
    auto bi = beta.impl();
    return make_result(input.shape(), std::move(out), {input, gamma, beta}, "batchnorm",
                       [xi, gi, bi, N, C, S, M, training, mu, invstd](TensorImpl& o) {
        const float* xd = xi->data.data();
        std::vector<double> dgamma(C, 0.0), dbeta(C, 0.0);
        std::vector<double> gx(xi->requires_grad ? xi->data.size() : 0, 0.0);
        for (int64_t c = 0; c < C; ++c) {
            const double g = gi->data[c];
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const size_t base = (n * C + c) * S;
                for (int64_t s = 0; s < S; ++s) {
                    const double dy = o.grad[base + s];
                    const double xhat = (xd[base + s] - mu[c]) * invstd[c];
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
            }
            dbeta[c] = sum_dy;
            dgamma[c] = sum_dy_xhat;
            if (!xi->requires_grad) continue;
            if (training) {
                // dL/dx = gamma*invstd/M * (M*dy - sum_dy - xhat*sum_dy_xhat)
                const double scale = g * invstd[c] / static_cast<double>(M);
                for (int64_t n = 0; n < N; ++n) {
                    const size_t base = (n * C + c) * S;
                    for (int64_t s = 0; s < S; ++s) {
                        const double dy = o.grad[base + s];
                        const double xhat = (xd[base + s] - mu[c]) * invstd[c];
                        gx[base + s] =
                            scale * (static_cast<double>(M) * dy - sum_dy - xhat * sum_dy_xhat);
                    }
                }
            } else {
                const double scale = g * invstd[c];
                for (int64_t n = 0; n < N; ++n) {
                    const size_t base = (n * C + c) * S;
                    for (int64_t s = 0; s < S; ++s) gx[base + s] = scale * o.grad[base + s];
                }
            }
        }
        if (xi->requires_grad) accumulate(*xi, gx);
        if (gi->requires_grad) accumulate(*gi, dgamma);
        if (bi->requires_grad) accumulate(*bi, dbeta);
    });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (input.ndim() != 2 || weight.ndim() != 2 || bias.ndim() != 1) {
        fail("linear: expected [N,D], [K,D], [K], got " + shape_str(input.shape()) + ", " +
             shape_str(weight.shape()) + ", " + shape_str(bias.shape()));
    }
    const int64_t N = input.dim(0), D = input.dim(1), K = weight.dim(0);
    if (weight.dim(1) != D || bias.dim(0) != K) {
        fail("linear: inner dimensions disagree: input " + shape_str(input.shape()) +
             ", weight " + shape_str(weight.shape()));
    }
    const float* xd = input.data().data();
    const float* wd = weight.data().data();
    std::vector<float> out(static_cast<size_t>(N * K));
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t k = 0; k < K; ++k) {
            double acc = bias.at(k);
            for (int64_t d = 0; d < D; ++d) acc += static_cast<double>(xd[n * D + d]) * wd[k * D + d];
            out[n * K + k] = static_cast<float>(acc);
        }
    }
    auto xi = input.impl();
    auto wi = weight.impl();
    auto bi = bias.impl();
    return make_result({N, K}, std::move(out), {input, weight, bias}, "linear",
                       [xi, wi, bi, N, D, K](TensorImpl& o) {
        const float* xd = xi->data.data();
        const float* wd = wi->data.data();
        if (xi->requires_grad) {
            std::vector<double> gx(xi->data.size(), 0.0);
            for (int64_t n = 0; n < N; ++n) {
                for (int64_t k = 0; k < K; ++k) {
                    const double g = o.grad[n * K + k];
                    for (int64_t d = 0; d < D; ++d) gx[n * D + d] += g * wd[k * D + d];
                }
            }
            accumulate(*xi, gx);
        }
        if (wi->requires_grad) {
            std::vector<double> gw(wi->data.size(), 0.0);
            for (int64_t n = 0; n < N; ++n) {
                for (int64_t k = 0; k < K; ++k) {
                    const double g = o.grad[n * K + k];
                    for (int64_t d = 0; d < D; ++d) gw[k * D + d] += g * xd[n * D + d];
                }
            }
            accumulate(*wi, gw);
        }
        if (bi->requires_grad) {
            std::vector<double> gb(bi->data.size(), 0.0);
            for (int64_t n = 0; n < N; ++n) {
                for (int64_t k = 0; k < K; ++k) gb[k] += o.grad[n * K + k];
            }
            accumulate(*bi, gb);
        }
    });
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.ndim() != 4) fail("global_avg_pool: expected [N,C,H,W], got " + shape_str(x.shape()));
    const int64_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
    const float* xd = x.data().data();
    std::vector<float> out(static_cast<size_t>(N * C));
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            double acc = 0.0;
            const size_t base = (n * C + c) * S;
            for (int64_t s = 0; s < S; ++s) acc += xd[base + s];
            out[n * C + c] = static_cast<float>(acc / static_cast<double>(S));
        }
    }
    auto xi = x.impl();
    return make_result({N, C}, std::move(out), {x}, "global_avg_pool",
                       [xi, N, C, S](TensorImpl& o) {
        xi->ensure_grad();
        const float inv = 1.0f / static_cast<float>(S);
        for (int64_t n = 0; n < N; ++n) {
            for (int64_t c = 0; c < C; ++c) {
                const float g = o.grad[n * C + c] * inv;
                const size_t base = (n * C + c) * S;
                for (int64_t s = 0; s < S; ++s) xi->grad[base + s] += g;
            }
        }
    });
}

Tensor scale_channels(const Tensor& x, const Tensor& s) {
    if (x.ndim() < 2) fail("scale_channels: input needs a channel dimension, got " +
                           shape_str(x.shape()));
    if (s.ndim() != 1 || s.dim(0) != x.dim(1)) {
        fail("scale_channels: scale " + shape_str(s.shape()) + " does not match channels of " +
             shape_str(x.shape()));
    }
    const int64_t N = x.dim(0), C = x.dim(1);
    const int64_t S = x.numel() / (N * C);
    const float* xd = x.data().data();
    std::vector<float> out(x.data().size());
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            const float sc = s.at(c);
            const size_t base = (n * C + c) * S;
            for (int64_t i = 0; i < S; ++i) out[base + i] = xd[base + i] * sc;
        }
    }
    auto xi = x.impl();
    auto si = s.impl();
    return make_result(x.shape(), std::move(out), {x, s}, "scale_channels",
                       [xi, si, N, C, S](TensorImpl& o) {
        if (xi->requires_grad) {
            xi->ensure_grad();
            for (int64_t n = 0; n < N; ++n) {
                for (int64_t c = 0; c < C; ++c) {
                    const float sc = si->data[c];
                    const size_t base = (n * C + c) * S;
                    for (int64_t i = 0; i < S; ++i) xi->grad[base + i] += o.grad[base + i] * sc;
                }
            }
        }
        if (si->requires_grad) {
            std::vector<double> gs(si->data.size(), 0.0);
            for (int64_t n = 0; n < N; ++n) {
                for (int64_t c = 0; c < C; ++c) {
                    const size_t base = (n * C + c) * S;
                    double acc = 0.0;
                    for (int64_t i = 0; i < S; ++i) {
                        acc += static_cast<double>(o.grad[base + i]) * xi->data[base + i];
                    }
                    gs[c] += acc;
                }
            }
            accumulate(*si, gs);
        }
    });
}

Tensor embed_channels(const Tensor& x, const std::vector<int64_t>& index_map,
                      int64_t out_channels) {
    if (x.ndim() < 2) fail("embed_channels: input needs a channel dimension");
    const int64_t N = x.dim(0), C = x.dim(1);
    const int64_t S = x.numel() / (N * C);
    if (static_cast<int64_t>(index_map.size()) != C) {
        fail("embed_channels: map covers " + std::to_string(index_map.size()) +
             " channels, input has " + std::to_string(C));
    }
    for (int64_t m : index_map) {
        if (m < 0 || m >= out_channels) fail("embed_channels: map entry out of range");
    }
    std::vector<int64_t> out_shape = x.shape();
    out_shape[1] = out_channels;
    std::vector<float> out(static_cast<size_t>(N * out_channels * S), 0.0f);
    const float* xd = x.data().data();
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            const size_t src = (n * C + c) * S;
            const size_t dst = (n * out_channels + index_map[c]) * S;
            for (int64_t i = 0; i < S; ++i) out[dst + i] = xd[src + i];
        }
    }
    auto xi = x.impl();
    return make_result(std::move(out_shape), std::move(out), {x}, "embed_channels",
                       [xi, index_map, N, C, S, out_channels](TensorImpl& o) {
        xi->ensure_grad();
        for (int64_t n = 0; n < N; ++n) {
            for (int64_t c = 0; c < C; ++c) {
                const size_t src = (n * C + c) * S;
                const size_t dst = (n * out_channels + index_map[c]) * S;
                for (int64_t i = 0; i < S; ++i) xi->grad[src + i] += o.grad[dst + i];
            }
        }
    });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2) {
        fail("softmax_cross_entropy: expected [N,K] logits, got " + shape_str(logits.shape()));
    }
    const int64_t N = logits.dim(0), K = logits.dim(1);
    if (N < 1) fail("softmax_cross_entropy: empty batch");
    if (static_cast<int64_t>(labels.size()) != N) {
        fail("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
             std::to_string(N));
    }
    for (int v : labels) {
        if (v < 0 || v >= K) {
            fail("softmax_cross_entropy: label " + std::to_string(v) + " outside [0," +
                 std::to_string(K) + ")");
        }
    }
    const float* xd = logits.data().data();
    std::vector<float> probs(static_cast<size_t>(N * K));
    double total = 0.0;
    for (int64_t n = 0; n < N; ++n) {
        double mx = xd[n * K];
        for (int64_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(xd[n * K + k]));
        double denom = 0.0;
        for (int64_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(xd[n * K + k]) - mx);
        const double lse = std::log(denom) + mx;
        for (int64_t k = 0; k < K; ++k) {
            probs[n * K + k] = static_cast<float>(std::exp(static_cast<double>(xd[n * K + k]) - lse));
        }
        total += lse - static_cast<double>(xd[n * K + labels[n]]);
    }
    const double loss = total / static_cast<double>(N);

    auto xi = logits.impl();
    Tensor r = make_result({1}, {static_cast<float>(loss)}, {logits}, "softmax_cross_entropy",
                           [xi, labels, probs = std::move(probs), N, K](TensorImpl& o) {
        std::vector<double> gx(xi->data.size(), 0.0);
        const double g = static_cast<double>(o.grad[0]) / static_cast<double>(N);
        for (int64_t n = 0; n < N; ++n) {
            for (int64_t k = 0; k < K; ++k) {
                double p = probs[n * K + k];
                if (k == labels[n]) p -= 1.0;
                gx[n * K + k] = g * p;
            }
        }
        accumulate(*xi, gx);
    });
    set_mirror(r, loss);
    return r;
}

std::vector<int> argmax_rows(const Tensor& logits) {
    if (logits.ndim() != 2) fail("argmax_rows: expected [N,K], got " + shape_str(logits.shape()));
    const int64_t N = logits.dim(0), K = logits.dim(1);
    std::vector<int> out(static_cast<size_t>(N));
    for (int64_t n = 0; n < N; ++n) {
        int best = 0;
        float bv = logits.at(n * K);
        for (int64_t k = 1; k < K; ++k) {
            const float v = logits.at(n * K + k);
            if (v > bv) {
                bv = v;
                best = static_cast<int>(k);
            }
        }
        out[n] = best;
    }
    return out;
}

}  // namespace whittle::ndgrad
