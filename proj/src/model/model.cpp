#include "d2pcca/model/model.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "d2pcca/errors.hpp"

namespace d2pcca::model {

using diff::Shape;

Tensor GaussianNoise::normal(const Shape& shape) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Tensor t(shape);
    for (double& v : t.values()) v = nd(rng_);
    return t;
}

std::string GaussianNoise::state() const {
    std::ostringstream os;
    os << seed_ << ' ' << rng_;
    return os.str();
}

void GaussianNoise::set_state(const std::string& state) {
    std::istringstream is(state);
    is >> seed_ >> rng_;
    if (!is) throw ConfigError("GaussianNoise: malformed generator state");
}

std::size_t LatentLayout::chain_dim(std::size_t i) const {
    if (i > set_dims.size()) throw ShapeError("LatentLayout: chain index " + std::to_string(i) + " out of range");
    return i == 0 ? shared_dim : set_dims[i - 1];
}

std::size_t LatentLayout::offset(std::size_t i) const {
    std::size_t o = 0;
    for (std::size_t k = 0; k < i; ++k) o += chain_dim(k);
    return o;
}

std::size_t LatentLayout::total() const {
    return shared_dim + std::accumulate(set_dims.begin(), set_dims.end(), std::size_t{0});
}

std::vector<std::size_t> LatentLayout::chain_dims() const {
    std::vector<std::size_t> dims{shared_dim};
    dims.insert(dims.end(), set_dims.begin(), set_dims.end());
    return dims;
}

void LatentLayout::validate() const {
    if (set_dims.empty()) throw ConfigError("latent layout needs at least one observation set");
    if (shared_dim == 0) throw ConfigError("shared latent dimension must be positive");
    for (std::size_t j = 0; j < set_dims.size(); ++j)
        if (set_dims[j] == 0) throw ConfigError("latent dimension of set " + std::to_string(j + 1) + " must be positive");
}

std::size_t ModelSpec::obs_dim() const { return std::accumulate(obs_dims.begin(), obs_dims.end(), std::size_t{0}); }

std::size_t ModelSpec::obs_offset(std::size_t set) const {
    return std::accumulate(obs_dims.begin(), obs_dims.begin() + static_cast<std::ptrdiff_t>(set), std::size_t{0});
}

void ModelSpec::validate() const {
    layout.validate();
    if (obs_dims.size() != layout.num_sets())
        throw ConfigError("model has " + std::to_string(layout.num_sets()) + " latent sets but " +
                          std::to_string(obs_dims.size()) + " observation sets");
    for (std::size_t j = 0; j < obs_dims.size(); ++j)
        if (obs_dims[j] == 0) throw ConfigError("observation set " + std::to_string(j + 1) + " is empty");
    if (encoder_hidden == 0) throw ConfigError("encoder hidden width must be positive");
    if (flow_layers > 0 && flow_hidden == 0) throw ConfigError("flow hidden width must be positive");
}

std::vector<Parameter*> D2pccaModel::parameters() {
    std::vector<Parameter*> out;
    for (auto& t : transitions) t.collect(out);
    for (auto& e : emissions) e.collect(out);
    encoder.collect(out);
    combiner.collect(out);
    out.push_back(&z0);
    if (flow) flow->collect(out);
    return out;
}

std::vector<const Parameter*> D2pccaModel::parameters() const {
    auto mutable_params = const_cast<D2pccaModel*>(this)->parameters();
    return {mutable_params.begin(), mutable_params.end()};
}

D2pccaModel make_model(const ModelSpec& spec, std::mt19937_64& rng) {
    spec.validate();
    D2pccaModel m;
    m.spec = spec;
    const auto& layout = spec.layout;
    for (std::size_t i = 0; i < layout.num_chains(); ++i)
        m.transitions.push_back(
            nets::make_transition("transition." + std::to_string(i), layout.chain_dim(i), spec.gate, rng));
    for (std::size_t j = 0; j < layout.num_sets(); ++j)
        m.emissions.push_back(nets::make_emission("emission." + std::to_string(j + 1), layout.shared_dim,
                                                  layout.set_dims[j], spec.obs_dims[j], rng));
    m.encoder = nets::make_encoder("encoder", spec.obs_dim(), spec.encoder_hidden, rng);
    m.combiner = nets::make_combiner("combiner", layout.total(), spec.encoder_hidden, rng);
    m.z0 = Parameter{"z0", Tensor(Shape{layout.total()})};
    if (spec.flow_layers > 0)
        m.flow = flows::make_flow_stack("flow", layout.total(), spec.flow_layers, spec.flow_hidden, rng);
    return m;
}

SequenceBatch SequenceBatch::from_sequences(const std::vector<const Tensor*>& seqs) {
    if (seqs.empty()) throw ShapeError("SequenceBatch: no sequences");
    const Shape& s = seqs.front()->shape();
    if (s.size() != 2) throw ShapeError("SequenceBatch: sequences must be (T, p) matrices");
    const std::size_t T = s[0], p = s[1], B = seqs.size();
    SequenceBatch out;
    out.steps.assign(T, Tensor(Shape{B, p}));
    for (std::size_t b = 0; b < B; ++b) {
        if (seqs[b]->shape() != s) throw ShapeError("SequenceBatch: sequences differ in shape");
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t k = 0; k < p; ++k) out.steps[t].at(b, k) = seqs[b]->at(t, k);
    }
    return out;
}

SequenceBatch SequenceBatch::from_sequences(const std::vector<Tensor>& seqs) {
    std::vector<const Tensor*> ptrs;
    for (const auto& s : seqs) ptrs.push_back(&s);
    return from_sequences(ptrs);
}

Tensor SequenceBatch::sequence(std::size_t b) const {
    Tensor out(Shape{length(), obs_dim()});
    for (std::size_t t = 0; t < length(); ++t)
        for (std::size_t k = 0; k < obs_dim(); ++k) out.at(t, k) = steps[t].at(b, k);
    return out;
}

Var initial_latent(Tape& tape, const D2pccaModel& model, std::size_t batch) {
    // Broadcasting z0 over a zero matrix gives a (batch, L) node that still routes gradients to z0.
    return tape.constant(Tensor(Shape{batch, model.latent_dim()})) + tape.param(model.z0);
}

Gaussian prior_step(Tape& tape, const D2pccaModel& model, Var z_prev) {
    const auto& layout = model.layout();
    if (z_prev.shape().size() != 2 || z_prev.shape()[1] != layout.total())
        throw ShapeError("prior_step: expected (batch, " + std::to_string(layout.total()) + ") latent, got " +
                         diff::to_string(z_prev.shape()));
    std::vector<Var> means, vars;
    for (std::size_t i = 0; i < layout.num_chains(); ++i) {
        const std::size_t o = layout.offset(i);
        const Gaussian g = nets::gated_transition(tape, model.transitions[i], slice(z_prev, o, o + layout.chain_dim(i)));
        means.push_back(g.mean);
        vars.push_back(g.var);
    }
    return {diff::concat(means), diff::concat(vars)};
}

std::vector<Gaussian> emit_step(Tape& tape, const D2pccaModel& model, Var z) {
    const auto& layout = model.layout();
    if (z.shape().size() != 2 || z.shape()[1] != layout.total())
        throw ShapeError("emit_step: expected (batch, " + std::to_string(layout.total()) + ") latent, got " +
                         diff::to_string(z.shape()));
    const Var shared = slice(z, 0, layout.shared_dim);
    std::vector<Gaussian> out;
    for (std::size_t j = 0; j < layout.num_sets(); ++j) {
        const std::size_t o = layout.offset(j + 1);
        out.push_back(nets::emission(tape, model.emissions[j], shared, slice(z, o, o + layout.set_dims[j])));
    }
    return out;
}

Var gaussian_log_density(Var x, const Gaussian& g) {
    const Var r = x - g.mean;
    const Var terms = add_scalar(log(g.var) + square(r) / g.var, std::log(2.0 * std::numbers::pi));
    return scale(sum_last(terms), -0.5);
}

Var gaussian_kl(const Gaussian& q, const Gaussian& p) {
    const Var terms = log(p.var) - log(q.var) + (q.var + square(q.mean - p.mean)) / p.var;
    return scale(add_scalar(sum_last(terms), -static_cast<double>(q.mean.shape().back())), 0.5);
}

Var emission_log_density(Tape& tape, const D2pccaModel& model, Var z, Var x) {
    const auto heads = emit_step(tape, model, z);
    Var total;
    for (std::size_t j = 0; j < heads.size(); ++j) {
        const std::size_t o = model.spec.obs_offset(j);
        const Var lp = gaussian_log_density(slice(x, o, o + model.spec.obs_dims[j]), heads[j]);
        total = j == 0 ? lp : total + lp;
    }
    return total;
}

GeneratedPaths generate(const D2pccaModel& model, std::size_t steps, std::size_t count, NoiseSource& noise) {
    if (steps == 0 || count == 0) throw ShapeError("generate: steps and count must be positive");
    const std::size_t L = model.latent_dim(), p = model.obs_dim();
    GeneratedPaths out{Tensor(Shape{count, steps, p}), Tensor(Shape{count, steps, L})};
    Tensor z_prev;
    for (std::size_t t = 0; t < steps; ++t) {
        // A fresh tape per step keeps memory flat for long simulations.
        Tape tape;
        const Var prev = t == 0 ? initial_latent(tape, model, count) : tape.constant(z_prev);
        const Gaussian prior = prior_step(tape, model, prev);
        const Var z = prior.mean + sqrt(prior.var) * tape.constant(noise.normal(Shape{count, L}));
        std::vector<Var> xs;
        for (const Gaussian& g : emit_step(tape, model, z))
            xs.push_back(g.mean + sqrt(g.var) * tape.constant(noise.normal(g.mean.shape())));
        const Tensor& zv = z.value();
        const Tensor& xv = diff::concat(xs).value();
        for (std::size_t b = 0; b < count; ++b) {
            for (std::size_t k = 0; k < L; ++k) out.z[(b * steps + t) * L + k] = zv.at(b, k);
            for (std::size_t k = 0; k < p; ++k) out.x[(b * steps + t) * p + k] = xv.at(b, k);
        }
        z_prev = zv;
    }
    return out;
}

std::vector<Var> encoder_states(Tape& tape, const D2pccaModel& model, const SequenceBatch& x) {
    if (x.length() == 0) throw ShapeError("encoder_states: empty sequence");
    if (x.obs_dim() != model.obs_dim())
        throw ShapeError("encoder_states: observation dimension " + std::to_string(x.obs_dim()) +
                         " does not match model dimension " + std::to_string(model.obs_dim()));
    std::vector<Var> xs;
    for (const Tensor& s : x.steps) xs.push_back(tape.constant(s));
    return nets::encode_backward(tape, model.encoder, xs);
}

PosteriorSample infer_posterior(Tape& tape, const D2pccaModel& model, const std::vector<Var>& h_r,
                                NoiseSource& noise, const flows::FlowStack* flow) {
    if (h_r.empty()) throw ShapeError("infer_posterior: empty sequence");
    const std::size_t B = h_r.front().shape()[0];
    const std::size_t L = model.latent_dim();
    PosteriorSample s;
    Var z_prev = initial_latent(tape, model, B);
    for (std::size_t t = 0; t < h_r.size(); ++t) {
        const Gaussian q = nets::combine(tape, model.combiner, z_prev, h_r[t]);
        const Var u = q.mean + sqrt(q.var) * tape.constant(noise.normal(Shape{B, L}));
        const Var log_q_u = gaussian_log_density(u, q);
        s.q.push_back(q);
        s.u.push_back(u);
        if (flow) {
            const flows::FlowOutput f = flows::flow_forward(tape, *flow, u);
            s.z.push_back(f.z);
            s.log_det.push_back(f.log_det);
            s.log_q.push_back(log_q_u - f.log_det);
        } else {
            s.z.push_back(u);
            s.log_q.push_back(log_q_u);
        }
        z_prev = s.z.back();
    }
    return s;
}

PosteriorSample infer_posterior(Tape& tape, const D2pccaModel& model, const SequenceBatch& x, NoiseSource& noise,
                                const flows::FlowStack* flow) {
    return infer_posterior(tape, model, encoder_states(tape, model, x), noise, flow);
}

namespace {

void require_finite(Var v, const char* term, std::size_t step) {
    if (!v.value().all_finite())
        throw NumericalError(std::string("elbo: non-finite ") + term + " term at step " + std::to_string(step + 1));
}

}  // namespace

ElboTerms elbo_with_flow(Tape& tape, const D2pccaModel& model, const SequenceBatch& x, NoiseSource& noise,
                         const ElboOptions& options, const flows::FlowStack* flow) {
    if (options.samples == 0) throw ConfigError("elbo: sample count must be at least 1");
    if (flow && flow->dim() != model.latent_dim()) throw ShapeError("flow_elbo: flow and latent dimensions differ");
    const std::vector<Var> h_r = encoder_states(tape, model, x);
    const std::size_t B = x.batch();
    Var recon_seq, kl_seq;
    for (std::size_t s = 0; s < options.samples; ++s) {
        const PosteriorSample post = infer_posterior(tape, model, h_r, noise, flow);
        Var z_prev = initial_latent(tape, model, B);
        for (std::size_t t = 0; t < x.length(); ++t) {
            const Gaussian prior = prior_step(tape, model, z_prev);
            const Var recon = emission_log_density(tape, model, post.z[t], tape.constant(x.steps[t]));
            Var kl;
            if (options.kl == KlEstimator::Analytic) {
                kl = gaussian_kl(post.q[t], prior);
                // Flow correction keeps the estimator unbiased for the flow bound
                // while reducing to the analytic KL exactly when the flow is the identity.
                if (flow)
                    kl = kl - (gaussian_log_density(post.z[t], prior) - gaussian_log_density(post.u[t], prior)) -
                         post.log_det[t];
            } else {
                kl = post.log_q[t] - gaussian_log_density(post.z[t], prior);
            }
            require_finite(recon, "reconstruction", t);
            require_finite(kl, "KL", t);
            recon_seq = (s == 0 && t == 0) ? recon : recon_seq + recon;
            kl_seq = (s == 0 && t == 0) ? kl : kl_seq + kl;
            z_prev = post.z[t];
        }
    }
    const double inv = 1.0 / static_cast<double>(options.samples);
    ElboTerms out;
    out.recon = scale(sum(recon_seq), inv);
    out.kl = scale(sum(kl_seq), inv);
    out.elbo = out.recon - out.kl;
    out.objective = out.recon - scale(out.kl, options.beta);
    out.per_sequence = Tensor(Shape{B});
    for (std::size_t b = 0; b < B; ++b)
        out.per_sequence[b] = (recon_seq.value()[b] - kl_seq.value()[b]) * inv;
    return out;
}

ElboTerms elbo(Tape& tape, const D2pccaModel& model, const SequenceBatch& x, NoiseSource& noise,
               const ElboOptions& options) {
    return elbo_with_flow(tape, model, x, noise, options, nullptr);
}

Reconstruction reconstruct(const D2pccaModel& model, const SequenceBatch& x, ReconstructMode mode,
                           NoiseSource& noise) {
    Tape tape;
    const flows::FlowStack* flow = model.flow ? &*model.flow : nullptr;
    ZeroNoise zero;
    PosteriorSample post;
    if (mode == ReconstructMode::PosteriorMean) {
        if (flow)
            throw ConfigError("reconstruct: posterior-mean mode is unsupported with a flow posterior (no analytic "
                              "mean); use sampled mode");
        post = infer_posterior(tape, model, x, zero);
    } else {
        post = infer_posterior(tape, model, x, noise, flow);
    }
    Reconstruction out;
    for (const Var& z : post.z) {
        std::vector<Var> means, vars;
        for (const Gaussian& g : emit_step(tape, model, z)) {
            means.push_back(g.mean);
            vars.push_back(g.var);
        }
        out.mean.push_back(diff::concat(means).value());
        out.variance.push_back(diff::concat(vars).value());
    }
    return out;
}

}  // namespace d2pcca::model
