#pragma once

#include "comln/dynamics.hpp"
#include "comln/embedding.hpp"
#include "comln/tasks.hpp"

namespace comln {

struct MetaParams {
    Matrix W0;                // N x d
    EmbeddingParams embedding;
    double log_T = 0.0;

    double T() const { return std::exp(log_T); }
    bool operator==(const MetaParams& o) const {
        return W0 == o.W0 && embedding == o.embedding && log_T == o.log_T;
    }
};

struct MetaGradients {
    Matrix grad_W0;            // N x d
    Matrix grad_phi_train;     // M x d
    Matrix grad_phi_test;      // M_test x d
    EmbeddingParams grad_embedding;
    double grad_T = 0.0;
    double grad_logT = 0.0;
    double diag_alignment = 0.0;  // <V, grad L_train(W_T)>

    // diagnostics, not gradients
    double outer_loss = 0.0;
    double accuracy = 0.0;
    StepStats stats;
};

// Row j of C is C_j = sum_i (V phi_i)^T B_T[i,j]  (M x N).
Matrix compute_C(const Matrix& V, const AugmentedState& state, const Matrix& phi);

// vec(V)^T dW(T)/dW0 = V - C^T phi
Matrix project_W0(const Matrix& V, const AugmentedState& state, const Matrix& phi);
Matrix project_W0(const Matrix& V, const Matrix& C, const Matrix& phi);

// Row m: vec(V)^T dW(T)/dphi_m = -[s_m^T V + C_m W0 + D_m phi],
// D[m,j] = sum_i z_T[i,j,m]^T V phi_i.
Matrix project_phi(const Matrix& V, const AugmentedState& state, const Matrix& phi, const Matrix& W0);
Matrix project_phi(const Matrix& V, const Matrix& C, const AugmentedState& state, const Matrix& phi,
                   const Matrix& W0);

// -<V, grad L_train(W_T)>
double grad_T(const Matrix& V, const Matrix& inner_grad_at_WT);

// Meta-gradients for already embedded train/test sets. grad_embedding is
// left empty.
MetaGradients embedded_metagrads(const Matrix& W0, double log_T, const EmbeddedSet& train,
                                 const EmbeddedSet& test, const LossConfig& cfg,
                                 const SolverConfig& solver, const AdaptLimits& limits = {});

// Full per-task bundle: embeds the episode, differentiates through the
// adaptation and backpropagates the embedding gradients into the network.
MetaGradients task_metagrads(const MetaParams& meta, const Episode& episode, const LossConfig& cfg,
                             const SolverConfig& solver, const AdaptLimits& limits = {});

// Shared by the oracles: fills grad_embedding from grad_phi_train/test.
void backprop_embedding(const EmbeddingParams& params, const std::vector<Tape>& train_tapes,
                        const std::vector<Tape>& test_tapes, MetaGradients& grads);

} // namespace comln
