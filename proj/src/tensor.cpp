#include "vhm/tensor.hpp"

#include <malloc.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "vhm/errors.hpp"
#include "vhm/parallel.hpp"

namespace vhm {

// ---------------------------------------------------------------------------
// ParamStore

template <typename T>
int ParamStore<T>::add(const std::string& name, const std::vector<int>& shape, bool trainable) {
    if (by_name_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    size_t count = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("non-positive dimension in " + name);
        count *= static_cast<size_t>(d);
    }
    Parameter<T> p;
    p.name = name;
    p.shape = shape;
    p.trainable = trainable;
    p.value.assign(count, T(0));
    p.grad.assign(count, T(0));
    params_.push_back(std::move(p));
    const int id = static_cast<int>(params_.size()) - 1;
    by_name_[name] = id;
    return id;
}

template <typename T>
int ParamStore<T>::index_of(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? -1 : it->second;
}

template <typename T>
void ParamStore<T>::zero_grad() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
}

template <typename T>
size_t ParamStore<T>::trainable_value_count() const {
    size_t n = 0;
    for (const auto& p : params_)
        if (p.trainable) n += p.size();
    return n;
}

template <typename T>
double ParamStore<T>::squared_l2_trainable() const {
    double s = 0.0;
    for (const auto& p : params_) {
        if (!p.trainable) continue;
        for (T v : p.value) s += static_cast<double>(v) * static_cast<double>(v);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Convolution

void ConvSpec::validate() const {
    if (kernel != 1 && kernel != 3) throw std::invalid_argument("kernel must be 1 or 3");
    if (kernel == 3 && !zero_pad) throw std::invalid_argument("kernel 3 requires zero padding");
    if (kernel == 1 && zero_pad) throw std::invalid_argument("kernel 1 forbids zero padding");
    if (groups < 1) throw std::invalid_argument("groups must be positive");
    if (c_in % groups != 0 || c_out % groups != 0)
        throw std::invalid_argument("channels not divisible by groups");
}

namespace {

// Activation-sized buffers churn through mmap/munmap with the default glibc
// threshold; keeping them on the heap lets iterations reuse the same pages.
struct MallocTuning {
    MallocTuning() { mallopt(M_MMAP_THRESHOLD, 32 << 20); }
} const malloc_tuning;

template <typename T>
inline void axpy(T* __restrict__ dst, const T* __restrict__ src, T k, int count) {
    for (int i = 0; i < count; ++i) dst[i] += k * src[i];
}

// The 3x3 kernels run over zero-padded plane copies as single contiguous
// sweeps of length h*(w+2): full vector width regardless of the row length,
// no edge branches. The sweep also produces values in the two padding
// columns of each row; extraction skips them.

inline int padded_row(int width) { return width + 2; }
inline size_t padded_count(int height, int width) {
    // two elements of slack: the sweeps read up to 2*pw + 2 past their base
    return static_cast<size_t>(height + 2) * padded_row(width) + 2;
}

template <typename T>
void pad_plane(const T* __restrict__ src, T* __restrict__ dst, int height, int width) {
    const int pw = padded_row(width);
    std::fill(dst, dst + padded_count(height, width), T(0));
    for (int y = 0; y < height; ++y)
        std::copy(src + static_cast<size_t>(y) * width, src + static_cast<size_t>(y + 1) * width,
                  dst + static_cast<size_t>(y + 1) * pw + 1);
}

// acc[j] += sum_k w9[k] * pad[j + ky*pw + kx] for j in [0, h*pw)
template <typename T>
void padded_conv3_sweep(T* __restrict__ acc, const T* __restrict__ pad, const T* w9, int height,
                        int width) {
    const int pw = padded_row(width);
    const T w0 = w9[0], w1 = w9[1], w2 = w9[2];
    const T w3 = w9[3], w4 = w9[4], w5 = w9[5];
    const T w6 = w9[6], w7 = w9[7], w8 = w9[8];
    const T* __restrict__ p0 = pad;
    const T* __restrict__ p1 = pad + pw;
    const T* __restrict__ p2 = pad + 2 * pw;
    const int n = height * pw;
    for (int j = 0; j < n; ++j)
        acc[j] += w0 * p0[j] + w1 * p0[j + 1] + w2 * p0[j + 2] +
                  w3 * p1[j] + w4 * p1[j + 1] + w5 * p1[j + 2] +
                  w6 * p2[j] + w7 * p2[j + 1] + w8 * p2[j + 2];
}

// Reductions carry explicit lane-wise partial sums: the order of additions is
// fixed by the source, so the compiler can vectorize them without
// reassociation and results stay identical from run to run.
template <typename T>
inline T dot_lanes(const T* __restrict__ a, const T* __restrict__ b, int n) {
    constexpr int L = 16;
    T lanes[L] = {};
    int j = 0;
    for (; j + L <= n; j += L)
        for (int k = 0; k < L; ++k) lanes[k] += a[j + k] * b[j + k];
    T s = 0;
    for (; j < n; ++j) s += a[j] * b[j];
    for (int k = 0; k < L; ++k) s += lanes[k];
    return s;
}

template <typename T>
inline T sum_lanes(const T* __restrict__ a, int n) {
    constexpr int L = 16;
    T lanes[L] = {};
    int j = 0;
    for (; j + L <= n; j += L)
        for (int k = 0; k < L; ++k) lanes[k] += a[j + k];
    T s = 0;
    for (; j < n; ++j) s += a[j];
    for (int k = 0; k < L; ++k) s += lanes[k];
    return s;
}

template <typename T>
inline T centered_sumsq_lanes(const T* __restrict__ a, T mean, int n) {
    constexpr int L = 16;
    T lanes[L] = {};
    int j = 0;
    for (; j + L <= n; j += L)
        for (int k = 0; k < L; ++k) {
            const T d = a[j + k] - mean;
            lanes[k] += d * d;
        }
    T s = 0;
    for (; j < n; ++j) {
        const T d = a[j] - mean;
        s += d * d;
    }
    for (int k = 0; k < L; ++k) s += lanes[k];
    return s;
}

// acc9[k] += sum over the plane of dout * input shifted by the kernel offset;
// both operands live in padded layout, so each offset is one contiguous dot
// product (padding entries of dpad are zero and contribute nothing).
template <typename T>
void padded_conv3_weight_sweep(const T* __restrict__ dpad, const T* __restrict__ xpad,
                               double* __restrict__ acc9, int height, int width) {
    const int pw = padded_row(width);
    const T* d = dpad + pw + 1;
    const int n = height * pw;
    for (int k = 0; k < 9; ++k)
        acc9[k] += static_cast<double>(dot_lanes(d, xpad + (k / 3) * pw + (k % 3), n));
}

template <typename T>
void extract_padded(const T* __restrict__ acc, T* __restrict__ dst, T bias_value, int height,
                    int width) {
    const int pw = padded_row(width);
    for (int y = 0; y < height; ++y) {
        const T* __restrict__ arow = acc + static_cast<size_t>(y) * pw;
        T* __restrict__ drow = dst + static_cast<size_t>(y) * width;
        for (int x = 0; x < width; ++x) drow[x] = bias_value + arow[x];
    }
}

template <typename T>
void extract_padded_add(const T* __restrict__ acc, T* __restrict__ dst, int height, int width) {
    const int pw = padded_row(width);
    for (int y = 0; y < height; ++y) {
        const T* __restrict__ arow = acc + static_cast<size_t>(y) * pw;
        T* __restrict__ drow = dst + static_cast<size_t>(y) * width;
        for (int x = 0; x < width; ++x) drow[x] += arow[x];
    }
}

} // namespace

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const T* weight, const T* bias, const ConvSpec& spec) {
    spec.validate();
    if (x.c != spec.c_in) throw std::invalid_argument("conv input channel mismatch");

    Tensor<T> out = Tensor<T>::uninitialized(x.n, spec.c_out, x.h, x.w);
    const int gi = spec.c_in / spec.groups;
    const int go = spec.c_out / spec.groups;
    const int px = x.pixels();

    if (spec.kernel == 1) {
        parallel_for(static_cast<size_t>(x.n) * spec.c_out, [&](size_t b, size_t e) {
            for (size_t job = b; job < e; ++job) {
                const int ni = static_cast<int>(job / spec.c_out);
                const int co = static_cast<int>(job % spec.c_out);
                const int g = co / go;
                T* __restrict__ dst = out.plane(ni, co);
                const T* __restrict__ wrow = weight + static_cast<size_t>(co) * gi;
                const T bv = bias != nullptr ? bias[co] : T(0);
                int ci = 0;
                if (gi >= 4) { // first block writes, the rest accumulate
                    const T* __restrict__ s0 = x.plane(ni, g * gi);
                    const T* __restrict__ s1 = x.plane(ni, g * gi + 1);
                    const T* __restrict__ s2 = x.plane(ni, g * gi + 2);
                    const T* __restrict__ s3 = x.plane(ni, g * gi + 3);
                    const T w0 = wrow[0], w1 = wrow[1], w2 = wrow[2], w3 = wrow[3];
                    for (int p = 0; p < px; ++p)
                        dst[p] = bv + w0 * s0[p] + w1 * s1[p] + w2 * s2[p] + w3 * s3[p];
                    ci = 4;
                } else {
                    const T* __restrict__ s0 = x.plane(ni, g * gi);
                    const T w0 = wrow[0];
                    for (int p = 0; p < px; ++p) dst[p] = bv + w0 * s0[p];
                    ci = 1;
                }
                for (; ci + 4 <= gi; ci += 4) {
                    const T* __restrict__ s0 = x.plane(ni, g * gi + ci);
                    const T* __restrict__ s1 = x.plane(ni, g * gi + ci + 1);
                    const T* __restrict__ s2 = x.plane(ni, g * gi + ci + 2);
                    const T* __restrict__ s3 = x.plane(ni, g * gi + ci + 3);
                    const T w0 = wrow[ci], w1 = wrow[ci + 1], w2 = wrow[ci + 2], w3 = wrow[ci + 3];
                    for (int p = 0; p < px; ++p)
                        dst[p] += w0 * s0[p] + w1 * s1[p] + w2 * s2[p] + w3 * s3[p];
                }
                for (; ci < gi; ++ci)
                    axpy(dst, x.plane(ni, g * gi + ci), wrow[ci], px);
            }
        });
        return out;
    }

    const size_t padded = padded_count(x.h, x.w);
    const size_t sweep = static_cast<size_t>(x.h) * padded_row(x.w);
    parallel_for(static_cast<size_t>(x.n), [&](size_t nb, size_t ne) {
        TensorBuf<T> pad(padded * spec.c_in);
        TensorBuf<T> acc(sweep);
        for (size_t ni = nb; ni < ne; ++ni) {
            for (int c = 0; c < spec.c_in; ++c)
                pad_plane(x.plane(static_cast<int>(ni), c), pad.data() + padded * c, x.h, x.w);
            for (int co = 0; co < spec.c_out; ++co) {
                const int g = co / go;
                std::fill(acc.begin(), acc.end(), T(0));
                for (int ci = 0; ci < gi; ++ci) {
                    const T* w9 = weight + (static_cast<size_t>(co) * gi + ci) * 9;
                    padded_conv3_sweep(acc.data(), pad.data() + padded * (g * gi + ci), w9, x.h,
                                       x.w);
                }
                extract_padded(acc.data(), out.plane(static_cast<int>(ni), co),
                               bias != nullptr ? bias[co] : T(0), x.h, x.w);
            }
        }
    });
    return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const T* weight, const ConvSpec& spec,
                     const Tensor<T>& dout, Tensor<T>* dx, T* dw, T* db) {
    const int gi = spec.c_in / spec.groups;
    const int go = spec.c_out / spec.groups;
    const int px = x.pixels();

    if (dx != nullptr && !dx->same_shape(x)) throw std::invalid_argument("dx shape mismatch");

    if (spec.kernel == 1) {
        if (dx != nullptr) {
            parallel_for(static_cast<size_t>(x.n) * spec.c_in, [&](size_t b, size_t e) {
                for (size_t job = b; job < e; ++job) {
                    const int ni = static_cast<int>(job / spec.c_in);
                    const int ci = static_cast<int>(job % spec.c_in);
                    const int g = ci / gi;
                    const int ci_local = ci % gi;
                    T* __restrict__ dst = dx->plane(ni, ci);
                    int co = g * go;
                    for (; co + 4 <= (g + 1) * go; co += 4) {
                        const T* __restrict__ d0 = dout.plane(ni, co);
                        const T* __restrict__ d1 = dout.plane(ni, co + 1);
                        const T* __restrict__ d2 = dout.plane(ni, co + 2);
                        const T* __restrict__ d3 = dout.plane(ni, co + 3);
                        const T w0 = weight[static_cast<size_t>(co) * gi + ci_local];
                        const T w1 = weight[static_cast<size_t>(co + 1) * gi + ci_local];
                        const T w2 = weight[static_cast<size_t>(co + 2) * gi + ci_local];
                        const T w3 = weight[static_cast<size_t>(co + 3) * gi + ci_local];
                        for (int p = 0; p < px; ++p)
                            dst[p] += w0 * d0[p] + w1 * d1[p] + w2 * d2[p] + w3 * d3[p];
                    }
                    for (; co < (g + 1) * go; ++co)
                        axpy(dst, dout.plane(ni, co),
                             weight[static_cast<size_t>(co) * gi + ci_local], px);
                }
            });
        }
        if (dw != nullptr) {
            parallel_for(static_cast<size_t>(spec.c_out), [&](size_t b, size_t e) {
                for (size_t co_s = b; co_s < e; ++co_s) {
                    const int co = static_cast<int>(co_s);
                    const int g = co / go;
                    for (int ci = 0; ci < gi; ++ci) {
                        double acc = 0.0;
                        for (int ni = 0; ni < x.n; ++ni)
                            acc += static_cast<double>(
                                dot_lanes(x.plane(ni, g * gi + ci), dout.plane(ni, co), px));
                        dw[static_cast<size_t>(co) * gi + ci] += static_cast<T>(acc);
                    }
                }
            });
        }
    } else if (dx != nullptr || dw != nullptr) {
        // one padding pass per sample feeds both the input gradient and the
        // weight gradient; batch accumulation order stays fixed
        const size_t padded = padded_count(x.h, x.w);
        const size_t sweep = static_cast<size_t>(x.h) * padded_row(x.w);
        std::vector<double> wacc(dw != nullptr ? static_cast<size_t>(spec.c_out) * gi * 9 : 0, 0.0);

        for (int ni = 0; ni < x.n; ++ni) {
            TensorBuf<T> dpad(padded * spec.c_out);
            parallel_for(static_cast<size_t>(spec.c_out), [&](size_t b, size_t e) {
                for (size_t co = b; co < e; ++co)
                    pad_plane(dout.plane(ni, static_cast<int>(co)), dpad.data() + padded * co, x.h,
                              x.w);
            });

            if (dx != nullptr) {
                parallel_for(static_cast<size_t>(spec.c_in), [&](size_t b, size_t e) {
                    TensorBuf<T> acc(sweep);
                    for (size_t ci = b; ci < e; ++ci) {
                        const int g = static_cast<int>(ci) / gi;
                        const int ci_local = static_cast<int>(ci) % gi;
                        std::fill(acc.begin(), acc.end(), T(0));
                        for (int co = g * go; co < (g + 1) * go; ++co) {
                            const T* w9 = weight + (static_cast<size_t>(co) * gi + ci_local) * 9;
                            T wf[9]; // flipped kernel for the transposed pass
                            for (int k = 0; k < 9; ++k) wf[k] = w9[8 - k];
                            padded_conv3_sweep(acc.data(), dpad.data() + padded * co, wf, x.h, x.w);
                        }
                        extract_padded_add(acc.data(), dx->plane(ni, static_cast<int>(ci)), x.h,
                                           x.w);
                    }
                });
            }

            if (dw != nullptr) {
                TensorBuf<T> xpad(padded * spec.c_in);
                for (int c = 0; c < spec.c_in; ++c)
                    pad_plane(x.plane(ni, c), xpad.data() + padded * c, x.h, x.w);
                parallel_for(static_cast<size_t>(spec.c_out), [&](size_t b, size_t e) {
                    for (size_t co_s = b; co_s < e; ++co_s) {
                        const int co = static_cast<int>(co_s);
                        const int g = co / go;
                        for (int ci = 0; ci < gi; ++ci)
                            padded_conv3_weight_sweep(
                                dpad.data() + padded * co, xpad.data() + padded * (g * gi + ci),
                                wacc.data() + (static_cast<size_t>(co) * gi + ci) * 9, x.h, x.w);
                    }
                });
            }
        }
        if (dw != nullptr)
            for (size_t k = 0; k < wacc.size(); ++k) dw[k] += static_cast<T>(wacc[k]);
    }

    if (db != nullptr) {
        for (int co = 0; co < spec.c_out; ++co) {
            double acc = 0.0;
            for (int ni = 0; ni < x.n; ++ni)
                acc += static_cast<double>(sum_lanes(dout.plane(ni, co), px));
            db[co] += static_cast<T>(acc);
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, const T* scale, const T* shift,
                            T* running_mean, T* running_var, bool training,
                            T momentum, T eps, BnSaved<T>* saved) {
    Tensor<T> out = Tensor<T>::uninitialized(x.n, x.c, x.h, x.w);
    const int px = x.pixels();
    const size_t m = static_cast<size_t>(x.n) * px;
    if (m == 0) throw std::invalid_argument("batchnorm on empty tensor");

    if (training && saved != nullptr) {
        saved->mean.assign(x.c, T(0));
        saved->inv_std.assign(x.c, T(0));
    }

    parallel_for(static_cast<size_t>(x.c), [&](size_t b, size_t e) {
        for (size_t cs = b; cs < e; ++cs) {
            const int c = static_cast<int>(cs);
            T mean, inv_std;
            if (training) {
                double sum = 0.0;
                for (int ni = 0; ni < x.n; ++ni)
                    sum += static_cast<double>(sum_lanes(x.plane(ni, c), px));
                const double mu = sum / static_cast<double>(m);
                double sq = 0.0;
                for (int ni = 0; ni < x.n; ++ni)
                    sq += static_cast<double>(
                        centered_sumsq_lanes(x.plane(ni, c), static_cast<T>(mu), px));
                const double var = sq / static_cast<double>(m);
                mean = static_cast<T>(mu);
                inv_std = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
                const double unbiased = m > 1 ? var * static_cast<double>(m) / (m - 1.0) : var;
                running_mean[c] = static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * mu);
                running_var[c] = static_cast<T>((1.0 - momentum) * running_var[c] + momentum * unbiased);
                if (saved != nullptr) {
                    saved->mean[c] = mean;
                    saved->inv_std[c] = inv_std;
                }
            } else {
                mean = running_mean[c];
                inv_std = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) +
                                                         static_cast<double>(eps)));
            }
            const T a = scale[c] * inv_std;
            const T b2 = shift[c] - a * mean;
            for (int ni = 0; ni < x.n; ++ni) {
                const T* s = x.plane(ni, c);
                T* d = out.plane(ni, c);
                for (int p = 0; p < px; ++p) d[p] = a * s[p] + b2;
            }
        }
    });
    return out;
}

template <typename T>
void batchnorm_backward(const Tensor<T>& x, const T* scale, const T* running_mean,
                        const T* running_var, bool training, T eps, const BnSaved<T>& saved,
                        const Tensor<T>& dout, Tensor<T>* dx, T* dscale, T* dshift) {
    const int px = x.pixels();
    const double m = static_cast<double>(x.n) * px;

    std::vector<double> sum_d(x.c), sum_dx(x.c);
    parallel_for(static_cast<size_t>(x.c), [&](size_t b, size_t e) {
        for (size_t cs = b; cs < e; ++cs) {
            const int c = static_cast<int>(cs);
            const T mean = training ? saved.mean[c] : running_mean[c];
            const T inv_std =
                training ? saved.inv_std[c]
                         : static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) +
                                                          static_cast<double>(eps)));
            double sd = 0.0, sds = 0.0;
            for (int ni = 0; ni < x.n; ++ni) {
                sd += static_cast<double>(sum_lanes(dout.plane(ni, c), px));
                sds += static_cast<double>(dot_lanes(dout.plane(ni, c), x.plane(ni, c), px));
            }
            const double sdx = (sds - static_cast<double>(mean) * sd) * inv_std;
            sum_d[c] = sd;
            sum_dx[c] = sdx;

            if (dx != nullptr) {
                if (training) {
                    // d/dx of batch-statistic normalization
                    const T k = scale[c] * inv_std;
                    const T c1 = static_cast<T>(sd / m);
                    const T c2 = static_cast<T>(sdx / m);
                    for (int ni = 0; ni < x.n; ++ni) {
                        const T* __restrict__ s = x.plane(ni, c);
                        const T* __restrict__ d = dout.plane(ni, c);
                        T* __restrict__ o = dx->plane(ni, c);
                        for (int p = 0; p < px; ++p) {
                            const T xh = (s[p] - mean) * inv_std;
                            o[p] += k * (d[p] - c1 - xh * c2);
                        }
                    }
                } else {
                    const T k = scale[c] * inv_std;
                    for (int ni = 0; ni < x.n; ++ni)
                        axpy(dx->plane(ni, c), dout.plane(ni, c), k, px);
                }
            }
        }
    });

    if (dscale != nullptr)
        for (int c = 0; c < x.c; ++c) dscale[c] += static_cast<T>(sum_dx[c]);
    if (dshift != nullptr)
        for (int c = 0; c < x.c; ++c) dshift[c] += static_cast<T>(sum_d[c]);
}

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::uninitialized(x.n, x.c, x.h, x.w);
    parallel_for(x.size(), [&](size_t b, size_t e) {
        for (size_t i = b; i < e; ++i) out.v[i] = x.v[i] > T(0) ? x.v[i] : T(0);
    });
    return out;
}

template <typename T>
Tensor<T> add_forward(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("add shape mismatch");
    Tensor<T> out = Tensor<T>::uninitialized(a.n, a.c, a.h, a.w);
    parallel_for(a.size(), [&](size_t s, size_t e) {
        for (size_t i = s; i < e; ++i) out.v[i] = a.v[i] + b.v[i];
    });
    return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.n != b.n || a.h != b.h || a.w != b.w)
        throw std::invalid_argument("concat spatial/batch mismatch");
    Tensor<T> out = Tensor<T>::uninitialized(a.n, a.c + b.c, a.h, a.w);
    const size_t plane = static_cast<size_t>(a.pixels());
    for (int ni = 0; ni < a.n; ++ni) {
        std::memcpy(out.plane(ni, 0), a.plane(ni, 0), plane * a.c * sizeof(T));
        std::memcpy(out.plane(ni, a.c), b.plane(ni, 0), plane * b.c * sizeof(T));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
int Tape<T>::push(Node node, Tensor<T> value) {
    nodes_.push_back(std::move(node));
    values_.push_back(std::move(value));
    return static_cast<int>(nodes_.size()) - 1;
}

template <typename T>
int Tape<T>::input(Tensor<T> x) {
    Node n;
    n.op = Op::input;
    return push(std::move(n), std::move(x));
}

template <typename T>
int Tape<T>::conv2d(int x, int weight_id, int bias_id, int kernel, int groups, bool zero_pad) {
    const auto& w = params_->param(weight_id);
    Node n;
    n.op = Op::conv;
    n.a = x;
    n.weight = weight_id;
    n.bias = bias_id;
    n.conv.c_in = values_[x].c;
    n.conv.c_out = w.shape.at(0);
    n.conv.kernel = kernel;
    n.conv.groups = groups;
    n.conv.zero_pad = zero_pad;
    n.conv.has_bias = bias_id >= 0;
    if (w.size() != n.conv.weight_count())
        throw std::invalid_argument("conv weight size mismatch for " + w.name);
    Tensor<T> out = conv2d_forward(values_[x], w.value.data(),
                                   bias_id >= 0 ? params_->param(bias_id).value.data() : nullptr,
                                   n.conv);
    return push(std::move(n), std::move(out));
}

template <typename T>
int Tape<T>::batchnorm(int x, int scale_id, int shift_id, int rmean_id, int rvar_id,
                       T momentum, T eps) {
    Node n;
    n.op = Op::bn;
    n.a = x;
    n.scale = scale_id;
    n.shift = shift_id;
    n.rmean = rmean_id;
    n.rvar = rvar_id;
    n.momentum = momentum;
    n.eps = eps;
    Tensor<T> out = batchnorm_forward(values_[x],
                                      params_->param(scale_id).value.data(),
                                      params_->param(shift_id).value.data(),
                                      params_->param(rmean_id).value.data(),
                                      params_->param(rvar_id).value.data(),
                                      bn_training_, momentum, eps, &n.bn_saved);
    return push(std::move(n), std::move(out));
}

template <typename T>
int Tape<T>::relu(int x) {
    Node n;
    n.op = Op::relu;
    n.a = x;
    return push(std::move(n), relu_forward(values_[x]));
}

template <typename T>
int Tape<T>::add(int a, int b) {
    Node n;
    n.op = Op::add;
    n.a = a;
    n.b = b;
    return push(std::move(n), add_forward(values_[a], values_[b]));
}

template <typename T>
int Tape<T>::concat(int a, int b) {
    Node n;
    n.op = Op::concat;
    n.a = a;
    n.b = b;
    return push(std::move(n), concat_channels(values_[a], values_[b]));
}

template <typename T>
void Tape<T>::backward(int output_id, const Tensor<T>& seed) {
    if (nodes_.empty()) throw std::runtime_error("backward before forward");
    if (!seed.same_shape(values_[output_id]))
        throw std::invalid_argument("seed shape mismatch");

    grads_.assign(nodes_.size(), Tensor<T>());
    auto grad_into = [&](int id) -> Tensor<T>& {
        if (grads_[id].size() == 0) {
            const auto& v = values_[id];
            grads_[id] = Tensor<T>(v.n, v.c, v.h, v.w);
        }
        return grads_[id];
    };
    grad_into(output_id) = seed;

    for (int i = output_id; i >= 0; --i) {
        if (grads_[i].size() == 0) continue; // node does not reach the output
        const Node& n = nodes_[i];
        const Tensor<T>& g = grads_[i];
        switch (n.op) {
            case Op::input:
                break;
            case Op::conv: {
                auto& w = params_->param(n.weight);
                T* db = n.bias >= 0 ? params_->param(n.bias).grad.data() : nullptr;
                conv2d_backward(values_[n.a], w.value.data(), n.conv, g,
                                &grad_into(n.a), w.grad.data(), db);
                break;
            }
            case Op::bn: {
                batchnorm_backward(values_[n.a], params_->param(n.scale).value.data(),
                                   params_->param(n.rmean).value.data(),
                                   params_->param(n.rvar).value.data(), bn_training_, n.eps,
                                   n.bn_saved, g, &grad_into(n.a),
                                   params_->param(n.scale).grad.data(),
                                   params_->param(n.shift).grad.data());
                break;
            }
            case Op::relu: {
                const Tensor<T>& x = values_[n.a];
                Tensor<T>& dst = grad_into(n.a);
                const T* __restrict__ xv = x.v.data();
                const T* __restrict__ gv = g.v.data();
                T* __restrict__ dv = dst.v.data();
                for (size_t k = 0; k < x.size(); ++k)
                    dv[k] += xv[k] > T(0) ? gv[k] : T(0);
                break;
            }
            case Op::add: {
                Tensor<T>& da = grad_into(n.a);
                Tensor<T>& db2 = grad_into(n.b);
                const T* __restrict__ gv = g.v.data();
                T* __restrict__ av = da.v.data();
                T* __restrict__ bv = db2.v.data();
                for (size_t k = 0; k < g.size(); ++k) {
                    av[k] += gv[k];
                    bv[k] += gv[k];
                }
                break;
            }
            case Op::concat: {
                Tensor<T>& da = grad_into(n.a);
                Tensor<T>& db2 = grad_into(n.b);
                for (int ni = 0; ni < g.n; ++ni) {
                    const size_t plane = static_cast<size_t>(g.pixels());
                    for (int c = 0; c < da.c; ++c) {
                        const T* s = g.plane(ni, c);
                        T* d = da.plane(ni, c);
                        for (size_t p = 0; p < plane; ++p) d[p] += s[p];
                    }
                    for (int c = 0; c < db2.c; ++c) {
                        const T* s = g.plane(ni, da.c + c);
                        T* d = db2.plane(ni, c);
                        for (size_t p = 0; p < plane; ++p) d[p] += s[p];
                    }
                }
                break;
            }
        }
    }
    ran_backward_ = true;
}

template <typename T>
const Tensor<T>& Tape<T>::gradient(int id) const {
    if (!ran_backward_) throw std::runtime_error("backward before forward");
    return grads_[id];
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
AdamState<T>::AdamState(const ParamStore<T>& params) {
    m_.resize(params.count());
    v_.resize(params.count());
    for (size_t i = 0; i < params.count(); ++i) {
        const auto& p = params.param(static_cast<int>(i));
        if (!p.trainable) continue;
        m_[i].assign(p.size(), T(0));
        v_[i].assign(p.size(), T(0));
    }
}

template <typename T>
void AdamState<T>::step(ParamStore<T>& params, const AdamConfig& cfg) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
    for (size_t i = 0; i < params.count(); ++i) {
        auto& p = params.param(static_cast<int>(i));
        if (!p.trainable) continue;
        T* m = m_[i].data();
        T* v = v_[i].data();
        for (size_t k = 0; k < p.size(); ++k) {
            const double g = static_cast<double>(p.grad[k]);
            const double mk = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            const double vk = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            m[k] = static_cast<T>(mk);
            v[k] = static_cast<T>(vk);
            const double update = cfg.learning_rate * (mk / bc1) / (std::sqrt(vk / bc2) + cfg.eps);
            p.value[k] = static_cast<T>(static_cast<double>(p.value[k]) - update);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCkptMagic[4] = {'V', 'H', 'M', 'W'};
constexpr uint16_t kCkptVersion = 1;

void ck_u16(std::string& s, uint16_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>(v >> 8));
}
void ck_u32(std::string& s, uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

} // namespace

template <typename T>
void write_checkpoint(const ParamStore<T>& params, const std::string& path) {
    std::string buf;
    buf.append(kCkptMagic, 4);
    ck_u16(buf, kCkptVersion);
    ck_u32(buf, static_cast<uint32_t>(params.count()));
    for (const auto& p : params.all()) {
        if (p.name.size() > 0xffff) throw std::invalid_argument("parameter name too long");
        ck_u16(buf, static_cast<uint16_t>(p.name.size()));
        buf.append(p.name);
        buf.push_back(static_cast<char>(p.shape.size()));
        for (int d : p.shape) ck_u32(buf, static_cast<uint32_t>(d));
        for (T v : p.value) {
            const float f = static_cast<float>(v);
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            ck_u32(buf, bits);
        }
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write failed: " + path);
}

template <typename T>
void read_checkpoint(ParamStore<T>& params, const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    size_t pos = 0;
    auto need = [&](size_t k) {
        if (pos + k > buf.size()) throw IoError("truncated checkpoint: " + path);
    };
    auto u16 = [&]() {
        need(2);
        const uint16_t v = static_cast<uint8_t>(buf[pos]) |
                           (static_cast<uint8_t>(buf[pos + 1]) << 8);
        pos += 2;
        return v;
    };
    auto u32 = [&]() {
        need(4);
        uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<uint8_t>(buf[pos + i]);
        pos += 4;
        return v;
    };

    need(4);
    if (std::memcmp(buf.data(), kCkptMagic, 4) != 0) throw IoError("bad magic in " + path);
    pos += 4;
    if (u16() != kCkptVersion) throw IoError("unsupported version in " + path);
    const uint32_t count = u32();
    if (count != params.count()) throw IoError("checkpoint parameter count mismatch: " + path);

    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t name_len = u16();
        need(name_len);
        const std::string name(buf.data() + pos, name_len);
        pos += name_len;
        need(1);
        const int rank = static_cast<uint8_t>(buf[pos++]);
        std::vector<int> shape(rank);
        for (int d = 0; d < rank; ++d) shape[d] = static_cast<int>(u32());

        const int id = params.index_of(name);
        if (id < 0) throw IoError("unknown parameter in checkpoint: " + name);
        auto& p = params.param(id);
        if (p.shape != shape) throw IoError("shape mismatch for parameter: " + name);
        for (size_t k = 0; k < p.size(); ++k) {
            const uint32_t bits = u32();
            float v;
            std::memcpy(&v, &bits, 4);
            p.value[k] = static_cast<T>(v);
        }
    }
    if (pos != buf.size()) throw IoError("trailing bytes in checkpoint: " + path);
}

// ---------------------------------------------------------------------------

template struct Tensor<float>;
template struct Tensor<double>;
template class ParamStore<float>;
template class ParamStore<double>;
template class Tape<float>;
template class Tape<double>;
template class AdamState<float>;
template class AdamState<double>;

#define VHM_INSTANTIATE(T)                                                                        \
    template Tensor<T> conv2d_forward<T>(const Tensor<T>&, const T*, const T*, const ConvSpec&); \
    template void conv2d_backward<T>(const Tensor<T>&, const T*, const ConvSpec&,                \
                                     const Tensor<T>&, Tensor<T>*, T*, T*);                      \
    template Tensor<T> batchnorm_forward<T>(const Tensor<T>&, const T*, const T*, T*, T*, bool,  \
                                            T, T, BnSaved<T>*);                                  \
    template void batchnorm_backward<T>(const Tensor<T>&, const T*, const T*, const T*, bool, T, \
                                        const BnSaved<T>&, const Tensor<T>&, Tensor<T>*, T*,     \
                                        T*);                                                     \
    template Tensor<T> relu_forward<T>(const Tensor<T>&);                                        \
    template Tensor<T> add_forward<T>(const Tensor<T>&, const Tensor<T>&);                       \
    template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                   \
    template void write_checkpoint<T>(const ParamStore<T>&, const std::string&);                 \
    template void read_checkpoint<T>(ParamStore<T>&, const std::string&);

VHM_INSTANTIATE(float)
VHM_INSTANTIATE(double)
#undef VHM_INSTANTIATE

} // namespace vhm
