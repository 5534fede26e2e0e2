#pragma once

#include <functional>
#include <map>
#include <memory>
#include <utility>

#include "cseg/common.hpp"

namespace cseg {

// Reverse-mode autodiff over 4-axis tensors. The graph is rebuilt every
// step (define-by-run): ops execute eagerly and push their backward
// closure onto a Tape. Tape::backward replays the closures in reverse.

template <class T>
struct TensorData {
    Shape4 shape;
    std::vector<T> v;  // values
    std::vector<T> g;  // gradient, same layout as v (allocated lazily)
    bool requires_grad = false;
    // id of the tape whose op produced this tensor; -1 for leaves.
    long tape_id = -1;
    std::string name;

    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), T(0));
    }
};

template <class T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape4 s, bool requires_grad = false) {
        Tensor t;
        t.p = std::make_shared<TensorData<T>>();
        t.p->shape = s;
        t.p->v.assign(static_cast<size_t>(s.numel()), T(0));
        t.p->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape4 s, T value, bool requires_grad = false) {
        Tensor t = zeros(s, requires_grad);
        for (auto& x : t.p->v) x = value;
        return t;
    }

    static Tensor from(Shape4 s, std::vector<T> vals, bool requires_grad = false) {
        CSEG_CHECK(static_cast<long>(vals.size()) == s.numel(),
                   "tensor init: ", vals.size(), " values for shape ", s.str());
        Tensor t;
        t.p = std::make_shared<TensorData<T>>();
        t.p->shape = s;
        t.p->v = std::move(vals);
        t.p->requires_grad = requires_grad;
        return t;
    }

    // Tensor is a shared handle: a const Tensor is a const handle to
    // mutable storage (pointer semantics), so backward closures holding
    // by-value captures can still accumulate gradients.
    bool defined() const { return p != nullptr; }
    const Shape4& shape() const { return p->shape; }
    long numel() const { return p->shape.numel(); }
    std::vector<T>& data() const { return p->v; }
    std::vector<T>& grad() const {
        p->ensure_grad();
        return p->g;
    }
    bool requires_grad() const { return p->requires_grad; }
    void set_requires_grad(bool rg) const { p->requires_grad = rg; }
    const std::string& name() const { return p->name; }
    void set_name(std::string n) const { p->name = std::move(n); }

    T& at(int b, int c, int h, int w) const { return p->v[idx4(p->shape, b, c, h, w)]; }

    T item() const {
        CSEG_CHECK(numel() == 1, "item() on non-scalar tensor ", shape().str());
        return p->v[0];
    }

    // Detached copy: same values, no grad history, no tape membership.
    Tensor detach_copy() const {
        Tensor t = Tensor::from(shape(), p->v, false);
        return t;
    }

    std::shared_ptr<TensorData<T>> p;
};

// Records one training step's forward ops. backward() may run once per
// recorded graph; re-running without a fresh forward is rejected, as is
// calling backward on a tensor the tape did not produce.
template <class T>
class Tape {
public:
    Tape() : id_(next_id()++) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    long id() const { return id_; }
    size_t num_ops() const { return ops_.size(); }

    // Called by every op implementation after computing its forward values.
    void record(std::function<void()> backward_fn) {
        ops_.push_back(std::move(backward_fn));
    }

    // Marks t as produced by this tape and propagates requires_grad.
    void own(Tensor<T>& t, bool requires_grad) {
        t.p->tape_id = id_;
        t.p->requires_grad = requires_grad;
        t.p->ensure_grad();
    }

    void backward(const Tensor<T>& loss) {
        CSEG_CHECK(loss.defined() && loss.p->tape_id == id_,
                   "backward: tensor was not produced by this tape (detached graph)");
        CSEG_CHECK(!consumed_, "backward: tape already consumed; re-run the forward pass");
        CSEG_CHECK(loss.numel() == 1, "backward: loss must be scalar, got ", loss.shape().str());
        consumed_ = true;
        loss.p->ensure_grad();
        loss.p->g[0] += T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    bool consumed() const { return consumed_; }

    void reset() {
        ops_.clear();
        consumed_ = false;
        id_ = next_id()++;
    }

private:
    static long& next_id() {
        static long id = 1;
        return id;
    }
    std::vector<std::function<void()>> ops_;
    bool consumed_ = false;
    long id_;
};

// Named parameter/buffer registry for a model. Parameters take part in
// optimization; buffers (e.g. batch-norm running stats) are checkpointed
// but never receive gradients.
template <class T>
class Params {
public:
    Tensor<T> add(const std::string& name, Tensor<T> t) {
        CSEG_CHECK(by_name_.find(name) == by_name_.end(), "duplicate parameter name: ", name);
        t.set_requires_grad(true);
        t.set_name(name);
        t.grad();  // allocate
        by_name_[name] = t;
        order_.push_back(t);
        return t;
    }

    Tensor<T> add_buffer(const std::string& name, Tensor<T> t) {
        CSEG_CHECK(by_name_.find(name) == by_name_.end(), "duplicate buffer name: ", name);
        t.set_requires_grad(false);
        t.set_name(name);
        by_name_[name] = t;
        buffers_.push_back(t);
        return t;
    }

    const std::vector<Tensor<T>>& trainable() const { return order_; }
    const std::vector<Tensor<T>>& buffers() const { return buffers_; }

    // Trainable parameters followed by buffers; checkpoint order.
    std::vector<Tensor<T>> all() const {
        std::vector<Tensor<T>> out = order_;
        out.insert(out.end(), buffers_.begin(), buffers_.end());
        return out;
    }

    Tensor<T> find(const std::string& name) const {
        auto it = by_name_.find(name);
        CSEG_CHECK(it != by_name_.end(), "unknown parameter: ", name);
        return it->second;
    }

    bool contains(const std::string& name) const { return by_name_.count(name) != 0; }

    void zero_grad() {
        for (auto& t : order_) {
            auto& g = t.grad();
            std::fill(g.begin(), g.end(), T(0));
        }
    }

    long count_trainable_scalars() const {
        long n = 0;
        for (const auto& t : order_) n += t.numel();
        return n;
    }

private:
    std::map<std::string, Tensor<T>> by_name_;
    std::vector<Tensor<T>> order_;
    std::vector<Tensor<T>> buffers_;
};

// Kaiming-uniform fill for conv weights: bound = sqrt(6 / fan_in).
template <class T>
void kaiming_uniform_(Tensor<T>& t, long fan_in, Rng& rng) {
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& x : t.data()) x = static_cast<T>(dist(rng));
}

}  // namespace cseg
