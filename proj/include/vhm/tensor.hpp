#pragma once

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <type_traits>
#include <vector>

namespace vhm {

namespace detail {

// std::vector that default-initializes (i.e. leaves fundamental types
// uninitialized) on resize; kernels that overwrite every element skip the
// zeroing pass this way.
template <typename T, typename A = std::allocator<T>>
class uninit_alloc : public A {
public:
    template <typename U>
    struct rebind {
        using other = uninit_alloc<U, typename std::allocator_traits<A>::template rebind_alloc<U>>;
    };
    using A::A;
    template <typename U>
    void construct(U* ptr) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(ptr)) U;
    }
    template <typename U, typename... Args>
    void construct(U* ptr, Args&&... args) {
        std::allocator_traits<A>::construct(static_cast<A&>(*this), ptr,
                                            std::forward<Args>(args)...);
    }
};

} // namespace detail

template <typename T>
using TensorBuf = std::vector<T, detail::uninit_alloc<T>>;

// Dense NCHW tensor. Precision is the template parameter: float for training
// and inference, double for verification.
template <typename T>
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    TensorBuf<T> v;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {
        v.resize(static_cast<size_t>(n_) * c_ * h_ * w_);
        std::fill(v.begin(), v.end(), T(0));
    }

    // for outputs whose every element is written by the producer
    static Tensor uninitialized(int n_, int c_, int h_, int w_) {
        Tensor t;
        t.n = n_;
        t.c = c_;
        t.h = h_;
        t.w = w_;
        t.v.resize(static_cast<size_t>(n_) * c_ * h_ * w_);
        return t;
    }

    size_t size() const { return v.size(); }
    int pixels() const { return h * w; }
    bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }

    T* plane(int ni, int ci) { return v.data() + (static_cast<size_t>(ni) * c + ci) * pixels(); }
    const T* plane(int ni, int ci) const {
        return v.data() + (static_cast<size_t>(ni) * c + ci) * pixels();
    }
    T& at(int ni, int ci, int y, int x) { return plane(ni, ci)[static_cast<size_t>(y) * w + x]; }
    T at(int ni, int ci, int y, int x) const { return plane(ni, ci)[static_cast<size_t>(y) * w + x]; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> o(n, c, h, w);
        for (size_t i = 0; i < v.size(); ++i) o.v[i] = static_cast<U>(v[i]);
        return o;
    }
};

template <typename T>
struct Parameter {
    std::string name;
    std::vector<int> shape;
    bool trainable = true;
    std::vector<T> value;
    std::vector<T> grad;

    size_t size() const { return value.size(); }
};

// Named parameters with matching gradient buffers, kept in insertion order so
// checkpoints and reductions are reproducible.
template <typename T>
class ParamStore {
public:
    int add(const std::string& name, const std::vector<int>& shape, bool trainable = true);
    int index_of(const std::string& name) const; // -1 when missing

    Parameter<T>& param(int id) { return params_[id]; }
    const Parameter<T>& param(int id) const { return params_[id]; }
    size_t count() const { return params_.size(); }

    std::vector<Parameter<T>>& all() { return params_; }
    const std::vector<Parameter<T>>& all() const { return params_; }

    void zero_grad();
    size_t trainable_value_count() const;
    double squared_l2_trainable() const;

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& p : params_) {
            const int id = out.add(p.name, p.shape, p.trainable);
            auto& q = out.param(id);
            for (size_t i = 0; i < p.value.size(); ++i) q.value[i] = static_cast<U>(p.value[i]);
        }
        return out;
    }

private:
    std::vector<Parameter<T>> params_;
    std::map<std::string, int> by_name_;
};

// ---------------------------------------------------------------------------
// Layer kernels. Shared by the recording tape and the no-grad executor.

struct ConvSpec {
    int c_in = 0;
    int c_out = 0;
    int kernel = 1;   // 1 or 3
    int groups = 1;
    bool zero_pad = false; // required for kernel 3, forbidden for kernel 1
    bool has_bias = false;

    size_t weight_count() const {
        return static_cast<size_t>(c_out) * (c_in / groups) * kernel * kernel;
    }
    void validate() const;
};

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const T* weight, const T* bias, const ConvSpec& spec);

// dx may be null when the input gradient is not needed; dw/db accumulate.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const T* weight, const ConvSpec& spec,
                     const Tensor<T>& dout, Tensor<T>* dx, T* dw, T* db);

template <typename T>
struct BnSaved {
    std::vector<T> mean, inv_std; // batch statistics captured in train mode
};

// Train mode normalizes with batch statistics over (N,H,W) and updates the
// running buffers in place (PyTorch convention: running = (1-m)*running +
// m*batch, unbiased variance for the running estimate). Eval mode is a pure
// per-channel affine map from the running statistics.
template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, const T* scale, const T* shift,
                            T* running_mean, T* running_var, bool training,
                            T momentum, T eps, BnSaved<T>* saved);

template <typename T>
void batchnorm_backward(const Tensor<T>& x, const T* scale, const T* running_mean,
                        const T* running_var, bool training, T eps, const BnSaved<T>& saved,
                        const Tensor<T>& dout, Tensor<T>* dx, T* dscale, T* dshift);

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x);

template <typename T>
Tensor<T> add_forward(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

// ---------------------------------------------------------------------------
// Reverse-mode tape over the layer set above.

template <typename T>
class Tape {
public:
    // bn_training selects batch statistics (and running-stat updates) versus
    // the frozen affine form.
    Tape(ParamStore<T>* params, bool bn_training)
        : params_(params), bn_training_(bn_training) {}

    int input(Tensor<T> x);
    int conv2d(int x, int weight_id, int bias_id, int kernel, int groups, bool zero_pad);
    int batchnorm(int x, int scale_id, int shift_id, int rmean_id, int rvar_id,
                  T momentum, T eps);
    int relu(int x);
    int add(int a, int b);
    int concat(int a, int b);

    const Tensor<T>& value(int id) const { return values_[id]; }
    size_t node_count() const { return nodes_.size(); }

    // Seeds d(loss)/d(output) and accumulates parameter gradients into the
    // store. Input-node gradients are available afterwards via gradient().
    void backward(int output_id, const Tensor<T>& seed);
    const Tensor<T>& gradient(int id) const;

private:
    enum class Op { input, conv, bn, relu, add, concat };
    struct Node {
        Op op;
        int a = -1, b = -1;
        ConvSpec conv;
        int weight = -1, bias = -1;
        int scale = -1, shift = -1, rmean = -1, rvar = -1;
        T momentum{}, eps{};
        BnSaved<T> bn_saved;
    };

    int push(Node node, Tensor<T> value);

    ParamStore<T>* params_;
    bool bn_training_;
    std::vector<Node> nodes_;
    std::vector<Tensor<T>> values_;
    std::vector<Tensor<T>> grads_;
    bool ran_backward_ = false;
};

// ---------------------------------------------------------------------------
// Adam with bias correction over the trainable parameters of a store.

struct AdamConfig {
    double learning_rate = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
class AdamState {
public:
    explicit AdamState(const ParamStore<T>& params);
    void step(ParamStore<T>& params, const AdamConfig& cfg);
    long step_count() const { return step_; }

private:
    std::vector<std::vector<T>> m_, v_; // indexed like the store
    long step_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint container: magic "VHMW", version, then per parameter the name,
// shape, and float32 payload. Round-trips bit-exactly.

template <typename T>
void write_checkpoint(const ParamStore<T>& params, const std::string& path);

// Fills an existing store; names and shapes must match the file.
template <typename T>
void read_checkpoint(ParamStore<T>& params, const std::string& path);

} // namespace vhm
