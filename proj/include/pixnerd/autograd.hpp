#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "pixnerd/tensor.hpp"

namespace pixnerd {

// A named trainable tensor. Gradients accumulate into `grad` across backward
// passes until zero_grad().
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
};

class ParamStore {
public:
    Param& add(const std::string& name, Tensor init);
    Param& get(const std::string& name);
    const Param& get(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    size_t size() const { return items_.size(); }
    Param& at(size_t i) { return *items_[i]; }
    const Param& at(size_t i) const { return *items_[i]; }

    void zero_grad();
    double grad_norm() const;
    int64_t total_elements() const;

private:
    std::vector<std::unique_ptr<Param>> items_;  // stable addresses
    std::unordered_map<std::string, size_t> index_;
};

// Dynamic reverse-mode tape. A graph is built per forward pass; backward()
// sweeps nodes in reverse creation order (creation order is topological).
// The tape must outlive its node ids and never moves.
class Tape {
public:
    using Id = int;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Id input(Tensor v);  // leaf without gradient
    Id param(Param& p);  // leaf accumulating into p.grad

    const Tensor& val(Id id) const { return nodes_[static_cast<size_t>(id)].value; }
    const Tensor& grad(Id id) const;
    bool requires_grad(Id id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
    size_t size() const { return nodes_.size(); }

    // y = x @ W^T + b over the last dim; W is [out, in], b is [out] or -1.
    Id linear(Id x, Id w, Id b);
    // Batched y_g = a_g @ w_g^T : a [G,m,k], w [G,n,k] -> [G,m,n].
    Id bmm_nt(Id a, Id w);

    Id add(Id a, Id b);
    Id add_weighted(Id a, Id b, double wa, double wb);
    Id mul(Id a, Id b);
    Id scale(Id a, double c);
    Id silu(Id a);

    // Root-mean-square normalization over the last dim; gain = -1 for none.
    Id rms_norm(Id x, Id gain, double eps);
    // Divide each last-dim vector by its L2 norm; vectors with norm < guard
    // pass through unchanged (keeps zero-initialized weights finite).
    Id row_l2_normalize(Id x, double guard);

    Id slice_last(Id x, int lo, int hi);
    Id reshape(Id x, Shape shape);
    Id embedding(Id table, std::vector<int> indices);

    // AdaLN building blocks: x is [B,N,D], shift/scale/gate are [B,D].
    Id modulate(Id x, Id shift, Id scale);
    Id row_scale(Id x, Id gate);

    // Multi-head self-attention over [B,N,D] with optional rotary tables
    // [N, head_dim/2]; logits are scaled by 1/sqrt(head_dim).
    Id attention(Id q, Id k, Id v, int heads, const Tensor* rope_cos, const Tensor* rope_sin);

    Id mse_loss(Id pred, Tensor target);
    // mean over rows of (1 - cos(a_row, b_row)); norms are smoothed by eps.
    Id cosine_align_loss(Id a, Tensor b, double eps);

    void backward(Id root);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool grad_alloc = false;
        Param* bound = nullptr;
        std::function<void()> back;
    };

    Id push(Tensor value, bool requires_grad);
    Tensor& grad_buf(Id id);
    bool has_grad(Id id) const { return nodes_[static_cast<size_t>(id)].grad_alloc; }
    Node& node(Id id) { return nodes_[static_cast<size_t>(id)]; }

    std::vector<Node> nodes_;
};

}  // namespace pixnerd
