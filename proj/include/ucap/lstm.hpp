#pragma once

#include <string>

#include "ucap/autodiff.hpp"
#include "ucap/optim.hpp"

namespace ucap {

// Single-layer LSTM cell. Gate pre-activations are packed as one 4h vector
// in i, f, g, o order:
//   z = W_x x + W_h h + b
//   i = sigmoid(z[0:h])      input gate
//   f = sigmoid(z[h:2h])     forget gate
//   g = tanh(z[2h:3h])       candidate
//   o = sigmoid(z[3h:4h])    output gate
//   c' = f * c + i * g
//   h' = o * tanh(c')
struct LstmWeights {
    Tensor w_x;  // [4h x in]
    Tensor w_h;  // [4h x h]
    Tensor b;    // [4h]

    std::size_t hidden_dim() const { return w_h.dim(1); }
    std::size_t input_dim() const { return w_x.dim(1); }

    static LstmWeights init(std::size_t input_dim, std::size_t hidden_dim, Rng& rng) {
        LstmWeights w;
        w.w_x = Tensor::param({4 * hidden_dim, input_dim}, rng);
        w.w_h = Tensor::param({4 * hidden_dim, hidden_dim}, rng);
        w.b = Tensor::param_zeros({4 * hidden_dim});
        return w;
    }

    void register_params(ParamSet& params, const std::string& prefix) const {
        params.add(prefix + ".w_x", w_x);
        params.add(prefix + ".w_h", w_h);
        params.add(prefix + ".b", b);
    }
};

struct LstmState {
    Tensor h;
    Tensor c;

    static LstmState zeros(std::size_t hidden_dim) {
        return {Tensor::zeros({hidden_dim}), Tensor::zeros({hidden_dim})};
    }
};

inline LstmState lstm_cell(const LstmWeights& w, const Tensor& x, const LstmState& state) {
    const std::size_t h = w.hidden_dim();
    if (x.rank() != 1 || x.dim(0) != w.input_dim())
        detail::shape_error("lstm_cell input", x.shape(), w.w_x.shape());
    if (state.h.dim(0) != h || state.c.dim(0) != h)
        detail::shape_error("lstm_cell state", state.h.shape(), w.w_h.shape());
    Tensor z = add(add(matvec(w.w_x, x), matvec(w.w_h, state.h)), w.b);
    Tensor gate_i = sigmoid(slice(z, 0, h));
    Tensor gate_f = sigmoid(slice(z, h, h));
    Tensor cand = tanh(slice(z, 2 * h, h));
    Tensor gate_o = sigmoid(slice(z, 3 * h, h));
    Tensor c_next = add(mul(gate_f, state.c), mul(gate_i, cand));
    Tensor h_next = mul(gate_o, tanh(c_next));
    return {h_next, c_next};
}

}  // namespace ucap
