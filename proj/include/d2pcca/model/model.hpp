#pragma once

#include <optional>
#include <random>
#include <vector>

#include "d2pcca/flows/flow.hpp"
#include "d2pcca/model/noise.hpp"
#include "d2pcca/nets/nets.hpp"

namespace d2pcca::model {

using diff::Parameter;
using diff::Tape;
using diff::Tensor;
using diff::Var;
using nets::Gaussian;

// Stacked latent [z0, z1, ..., zD]: chain 0 is shared, chain j is private to set j.
struct LatentLayout {
    std::size_t shared_dim = 1;
    std::vector<std::size_t> set_dims;

    std::size_t num_sets() const { return set_dims.size(); }
    std::size_t num_chains() const { return set_dims.size() + 1; }
    std::size_t chain_dim(std::size_t i) const;
    std::size_t offset(std::size_t i) const;
    std::size_t total() const;
    std::vector<std::size_t> chain_dims() const;
    void validate() const;

    bool operator==(const LatentLayout&) const = default;
};

struct ModelSpec {
    LatentLayout layout;
    std::vector<std::size_t> obs_dims;  // one per set
    nets::GateVariant gate = nets::GateVariant::Gru;
    std::size_t encoder_hidden = nets::kEncoderHidden;
    std::size_t flow_layers = 0;  // 0 disables the flow posterior
    std::size_t flow_hidden = flows::kDefaultHidden;

    std::size_t obs_dim() const;
    std::size_t obs_offset(std::size_t set) const;
    void validate() const;
};

struct D2pccaModel {
    ModelSpec spec;
    std::vector<nets::TransitionNet> transitions;  // one per chain
    std::vector<nets::EmissionNet> emissions;      // one per set
    nets::BackwardEncoder encoder;
    nets::CombinerNet combiner;
    Parameter z0;  // learned initial latent, shape (L)
    std::optional<flows::FlowStack> flow;

    const LatentLayout& layout() const { return spec.layout; }
    std::size_t latent_dim() const { return spec.layout.total(); }
    std::size_t obs_dim() const { return spec.obs_dim(); }

    // Every trainable parameter in a fixed order.
    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
};

D2pccaModel make_model(const ModelSpec& spec, std::mt19937_64& rng);

// A mini-batch of equal-length sequences; steps[t] has shape (batch, p).
struct SequenceBatch {
    std::vector<Tensor> steps;

    std::size_t batch() const { return steps.empty() ? 0 : steps.front().dim(0); }
    std::size_t length() const { return steps.size(); }
    std::size_t obs_dim() const { return steps.empty() ? 0 : steps.front().dim(1); }

    // From per-sequence (T, p) matrices.
    static SequenceBatch from_sequences(const std::vector<const Tensor*>& sequences);
    static SequenceBatch from_sequences(const std::vector<Tensor>& sequences);
    Tensor sequence(std::size_t b) const;  // (T, p)
};

// z0 broadcast to (batch, L).
Var initial_latent(Tape& tape, const D2pccaModel& model, std::size_t batch);

Gaussian prior_step(Tape& tape, const D2pccaModel& model, Var z_prev);
std::vector<Gaussian> emit_step(Tape& tape, const D2pccaModel& model, Var z);

// Row-wise diagonal Gaussian log density and KL, summed over the last axis: (B, n) -> (B).
Var gaussian_log_density(Var x, const Gaussian& g);
Var gaussian_kl(const Gaussian& q, const Gaussian& p);

// Sum over sets of log p(x_t^j | z0, zj); x is (B, p). Returns (B).
Var emission_log_density(Tape& tape, const D2pccaModel& model, Var z, Var x);

struct GeneratedPaths {
    Tensor x;  // (count, T, p)
    Tensor z;  // (count, T, L)
};
GeneratedPaths generate(const D2pccaModel& model, std::size_t steps, std::size_t count, NoiseSource& noise);

// Backward encoder states h_r[t], each (B, H).
std::vector<Var> encoder_states(Tape& tape, const D2pccaModel& model, const SequenceBatch& x);

struct PosteriorSample {
    std::vector<Var> z;         // latents fed to the generative model, (B, L)
    std::vector<Var> u;         // base samples; equal to z without a flow
    std::vector<Gaussian> q;    // base posterior q(u_t | z_{t-1}, x_{t:T})
    std::vector<Var> log_q;     // (B): log q_psi(z_t | ...) = log q(u_t) - log|det J|
    std::vector<Var> log_det;   // (B) per step; empty without a flow
};

// One reparameterized draw of the ST-R posterior. With `flow`, z_t = f(u_t)
// and the combiner conditions on f(u_{t-1}).
PosteriorSample infer_posterior(Tape& tape, const D2pccaModel& model, const std::vector<Var>& h_r,
                                NoiseSource& noise, const flows::FlowStack* flow = nullptr);
PosteriorSample infer_posterior(Tape& tape, const D2pccaModel& model, const SequenceBatch& x, NoiseSource& noise,
                                const flows::FlowStack* flow = nullptr);

enum class KlEstimator { Analytic, Sampled };

struct ElboOptions {
    std::size_t samples = 1;
    KlEstimator kl = KlEstimator::Analytic;
    double beta = 1.0;
};

// All scalars are sums over the batch of per-sequence values, averaged over samples.
struct ElboTerms {
    Var elbo;       // recon - kl
    Var recon;
    Var kl;         // everything that is not reconstruction
    Var objective;  // recon - beta * kl
    Tensor per_sequence;  // (B) per-sequence ELBO values
};

ElboTerms elbo(Tape& tape, const D2pccaModel& model, const SequenceBatch& x, NoiseSource& noise,
               const ElboOptions& options = {});

// Shared implementation of the plain and flow-augmented bounds.
ElboTerms elbo_with_flow(Tape& tape, const D2pccaModel& model, const SequenceBatch& x, NoiseSource& noise,
                         const ElboOptions& options, const flows::FlowStack* flow);

enum class ReconstructMode { PosteriorMean, Sampled };

struct Reconstruction {
    std::vector<Tensor> mean;      // per step, (B, p)
    std::vector<Tensor> variance;  // per step, (B, p)
};

// Posterior-mean mode follows the zero-noise combiner path and is rejected
// when a flow is attached; sampled mode draws one posterior path.
Reconstruction reconstruct(const D2pccaModel& model, const SequenceBatch& x, ReconstructMode mode,
                           NoiseSource& noise);

}  // namespace d2pcca::model
