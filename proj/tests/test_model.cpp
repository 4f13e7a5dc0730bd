#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "d2pcca/diffmath/grad_check.hpp"
#include "d2pcca/errors.hpp"
#include "d2pcca/lds/kalman.hpp"
#include "d2pcca/model/model.hpp"
#include "doctest.h"
#include "linear_instance.hpp"

using namespace d2pcca;
using namespace d2pcca::model;
using diff::Shape;

namespace {

ModelSpec small_spec(std::size_t hidden = 16) {
    ModelSpec s;
    s.layout = LatentLayout{1, {2, 2}};
    s.obs_dims = {3, 2};
    s.encoder_hidden = hidden;
    return s;
}

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double sd = 1.0) {
    std::normal_distribution<double> nd(0.0, sd);
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = nd(rng);
    return t;
}

SequenceBatch random_batch(std::mt19937_64& rng, std::size_t B, std::size_t T, std::size_t p) {
    SequenceBatch x;
    for (std::size_t t = 0; t < T; ++t) x.steps.push_back(random_tensor(rng, {B, p}));
    return x;
}

Tensor columns(const Tensor& m, std::size_t begin, std::size_t end) {
    Tensor out(Shape{m.dim(0), end - begin});
    for (std::size_t r = 0; r < m.dim(0); ++r)
        for (std::size_t c = begin; c < end; ++c) out.at(r, c - begin) = m.at(r, c);
    return out;
}

// Diagonal Gaussian log density evaluated with a plain loop.
double naive_log_density(const Tensor& x, const Tensor& mean, const Tensor& var, std::size_t row) {
    double total = 0.0;
    for (std::size_t k = 0; k < x.dim(1); ++k) {
        const double r = x.at(row, k) - mean.at(row, k);
        total += -0.5 * (std::log(2.0 * std::numbers::pi * var.at(row, k)) + r * r / var.at(row, k));
    }
    return total;
}

}  // namespace

TEST_CASE("latent layout offsets partition the stacked latent") {
    const LatentLayout l{1, {2, 3, 2}};
    CHECK(l.total() == 8);
    CHECK(l.num_chains() == 4);
    CHECK(l.offset(0) == 0);
    CHECK(l.offset(1) == 1);
    CHECK(l.offset(2) == 3);
    CHECK(l.offset(3) == 6);
    std::size_t covered = 0;
    for (std::size_t i = 0; i < l.num_chains(); ++i) {
        CHECK(l.offset(i) == covered);
        covered += l.chain_dim(i);
    }
    CHECK(covered == l.total());
    CHECK_THROWS_AS(LatentLayout({1, {}}).validate(), ConfigError);
    CHECK_THROWS_AS(LatentLayout({0, {2}}).validate(), ConfigError);
}

TEST_CASE("model parameters have unique names and a stable order") {
    std::mt19937_64 rng(1);
    ModelSpec spec = small_spec();
    spec.flow_layers = 2;
    spec.gate = nets::GateVariant::Lstm;
    D2pccaModel m = make_model(spec, rng);
    const auto params = m.parameters();
    std::set<std::string> names;
    for (const Parameter* p : params) names.insert(p->name);
    CHECK(names.size() == params.size());
    CHECK(names.count("z0") == 1);
    CHECK(names.count("flow.1.w_scale") == 1);
    CHECK(names.count("transition.0.w.1.bias") == 1);
    D2pccaModel copy = m;
    const auto copied = copy.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) CHECK(copied[k]->name == params[k]->name);
}

TEST_CASE("prior step is chain-wise independent") {
    std::mt19937_64 rng(2);
    const D2pccaModel m = make_model(small_spec(), rng);
    const Tensor z = random_tensor(rng, {4, 5});
    Tape tape;
    const Gaussian base = prior_step(tape, m, tape.constant(z));
    CHECK(base.mean.shape() == Shape{4, 5});
    CHECK(base.var.shape() == Shape{4, 5});
    for (double v : base.var.value().values()) CHECK(v > 0.0);

    for (std::size_t j = 0; j < 3; ++j) {
        Tensor moved = z;
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = m.layout().offset(j); c < m.layout().offset(j) + m.layout().chain_dim(j); ++c)
                moved.at(r, c) += 0.7;
        const Gaussian g = prior_step(tape, m, tape.constant(moved));
        for (std::size_t i = 0; i < 3; ++i) {
            const std::size_t o = m.layout().offset(i), e = o + m.layout().chain_dim(i);
            const bool same_mean = columns(g.mean.value(), o, e).identical(columns(base.mean.value(), o, e));
            const bool same_var = columns(g.var.value(), o, e).identical(columns(base.var.value(), o, e));
            if (i == j) {
                CHECK_FALSE(same_mean);
            } else {
                CHECK(same_mean);
                CHECK(same_var);
            }
        }
    }
}

TEST_CASE("prior step equals per-chain transitions concatenated") {
    std::mt19937_64 rng(3);
    const D2pccaModel m = make_model(small_spec(), rng);
    Tape tape;
    const Var z = tape.constant(random_tensor(rng, {3, 5}));
    const Gaussian joint = prior_step(tape, m, z);
    std::vector<Var> means, vars;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::size_t o = m.layout().offset(i);
        const Gaussian g = nets::gated_transition(tape, m.transitions[i], slice(z, o, o + m.layout().chain_dim(i)));
        means.push_back(g.mean);
        vars.push_back(g.var);
    }
    CHECK(joint.mean.value().identical(diff::concat(means).value()));
    CHECK(joint.var.value().identical(diff::concat(vars).value()));
}

TEST_CASE("emission reads only the shared and own chains") {
    std::mt19937_64 rng(4);
    const D2pccaModel m = make_model(small_spec(), rng);
    const Tensor z = random_tensor(rng, {4, 5});
    Tape tape;
    const auto base = emit_step(tape, m, tape.constant(z));
    REQUIRE(base.size() == 2);
    CHECK(base[0].mean.shape() == Shape{4, 3});
    CHECK(base[1].mean.shape() == Shape{4, 2});

    Tensor moved = z;  // shift chain 2 only
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 3; c < 5; ++c) moved.at(r, c) += 0.9;
    auto heads = emit_step(tape, m, tape.constant(moved));
    CHECK(heads[0].mean.value().identical(base[0].mean.value()));
    CHECK(heads[0].var.value().identical(base[0].var.value()));
    CHECK_FALSE(heads[1].mean.value().identical(base[1].mean.value()));

    moved = z;  // shift the shared chain
    for (std::size_t r = 0; r < 4; ++r) moved.at(r, 0) += 0.9;
    heads = emit_step(tape, m, tape.constant(moved));
    CHECK_FALSE(heads[0].mean.value().identical(base[0].mean.value()));
    CHECK_FALSE(heads[1].mean.value().identical(base[1].mean.value()));
}

TEST_CASE("joint emission density is the sum of per-set densities") {
    std::mt19937_64 rng(5);
    const D2pccaModel m = make_model(small_spec(), rng);
    const Tensor z = random_tensor(rng, {3, 5});
    const Tensor x = random_tensor(rng, {3, 5});
    Tape tape;
    const Tensor joint = emission_log_density(tape, m, tape.constant(z), tape.constant(x)).value();
    const auto heads = emit_step(tape, m, tape.constant(z));
    for (std::size_t b = 0; b < 3; ++b) {
        const double manual = naive_log_density(columns(x, 0, 3), heads[0].mean.value(), heads[0].var.value(), b) +
                              naive_log_density(columns(x, 3, 5), heads[1].mean.value(), heads[1].var.value(), b);
        CHECK(joint[b] == doctest::Approx(manual).epsilon(1e-12));
    }
}

TEST_CASE("closed-form Gaussian KL") {
    Tape tape;
    const Gaussian q{tape.constant(Tensor(Shape{1, 1}, 1.0)), tape.constant(Tensor(Shape{1, 1}, 1.0))};
    const Gaussian p{tape.constant(Tensor(Shape{1, 1}, 0.0)), tape.constant(Tensor(Shape{1, 1}, 1.0))};
    CHECK(gaussian_kl(q, p).value()[0] == 0.5);
    CHECK(gaussian_kl(q, q).value()[0] == 0.0);
}

TEST_CASE("generate returns consistent shapes") {
    std::mt19937_64 rng(6);
    const D2pccaModel m = make_model(small_spec(), rng);
    GaussianNoise noise(7);
    const GeneratedPaths g = generate(m, 6, 3, noise);
    CHECK(g.x.shape() == Shape{3, 6, 5});
    CHECK(g.z.shape() == Shape{3, 6, 5});
    CHECK(g.x.all_finite());
}

TEST_CASE("near noise-free generation follows the deterministic recursion") {
    std::mt19937_64 rng(8);
    D2pccaModel m = make_model(small_spec(), rng);
    for (auto& t : m.transitions) {
        t.s_head.weight.value.fill(0.0);
        t.s_head.bias.value.fill(-50.0);
    }
    for (auto& e : m.emissions) {
        e.logvar_head.weight.value.fill(0.0);
        e.logvar_head.bias.value.fill(-50.0);
    }
    GaussianNoise noise(9);
    const GeneratedPaths g = generate(m, 10, 2, noise);
    Tape tape;
    Var z = initial_latent(tape, m, 2);
    for (std::size_t t = 0; t < 10; ++t) {
        z = prior_step(tape, m, z).mean;
        std::vector<Var> means;
        for (const auto& h : emit_step(tape, m, z)) means.push_back(h.mean);
        const Tensor x = diff::concat(means).value();
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t k = 0; k < 5; ++k) {
                CHECK(std::abs(g.z[(b * 10 + t) * 5 + k] - z.value().at(b, k)) < 0.05);
                CHECK(std::abs(g.x[(b * 10 + t) * 5 + k] - x.at(b, k)) < 0.05);
            }
    }
}

TEST_CASE("first generated latent averages to the prior mean") {
    std::mt19937_64 rng(10);
    ModelSpec spec;
    spec.layout = LatentLayout{1, {1}};
    spec.obs_dims = {2};
    D2pccaModel m = make_model(spec, rng);
    for (double& v : m.z0.value.values()) v = 0.8;
    Tape tape;
    const Gaussian prior = prior_step(tape, m, initial_latent(tape, m, 1));
    GaussianNoise noise(11);
    const std::size_t chunks = 10, per_chunk = 10000, n = chunks * per_chunk;
    std::vector<double> sum(2, 0.0), sum_sq(2, 0.0);
    for (std::size_t c = 0; c < chunks; ++c) {
        const GeneratedPaths g = generate(m, 1, per_chunk, noise);
        for (std::size_t b = 0; b < per_chunk; ++b)
            for (std::size_t k = 0; k < 2; ++k) {
                const double v = g.z[b * 2 + k];
                sum[k] += v;
                sum_sq[k] += v * v;
            }
    }
    for (std::size_t k = 0; k < 2; ++k) {
        const double mean = sum[k] / static_cast<double>(n);
        const double se = std::sqrt((sum_sq[k] / static_cast<double>(n) - mean * mean) / static_cast<double>(n));
        CHECK(std::abs(mean - prior.mean.value()[k]) < 3.0 * se);
    }
}

TEST_CASE("zero noise gives the posterior mean path") {
    std::mt19937_64 rng(12);
    const D2pccaModel m = make_model(small_spec(), rng);
    const SequenceBatch x = random_batch(rng, 3, 5, 5);
    ZeroNoise zero;
    Tape tape;
    const PosteriorSample s = infer_posterior(tape, m, x, zero);
    REQUIRE(s.z.size() == 5);
    for (std::size_t t = 0; t < 5; ++t) CHECK(s.z[t].value().identical(s.q[t].mean.value()));
    CHECK(s.log_det.empty());
}

TEST_CASE("posterior at every step sees the last observation") {
    std::mt19937_64 rng(13);
    const D2pccaModel m = make_model(small_spec(), rng);
    SequenceBatch x = random_batch(rng, 2, 6, 5);
    ZeroNoise zero;
    Tape tape;
    const PosteriorSample a = infer_posterior(tape, m, x, zero);
    x.steps.back()[0] += 0.5;
    const PosteriorSample b = infer_posterior(tape, m, x, zero);
    for (std::size_t t = 0; t < 6; ++t) {
        CHECK_FALSE(a.q[t].mean.value().identical(b.q[t].mean.value()));
        CHECK_FALSE(a.q[t].var.value().identical(b.q[t].var.value()));
    }
}

TEST_CASE("posterior log density matches an independent evaluation") {
    std::mt19937_64 rng(14);
    const D2pccaModel m = make_model(small_spec(), rng);
    const SequenceBatch x = random_batch(rng, 3, 4, 5);
    GaussianNoise noise(15);
    Tape tape;
    const PosteriorSample s = infer_posterior(tape, m, x, noise);
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t b = 0; b < 3; ++b)
            CHECK(s.log_q[t].value()[b] ==
                  doctest::Approx(naive_log_density(s.z[t].value(), s.q[t].mean.value(), s.q[t].var.value(), b))
                      .epsilon(1e-12));
}

TEST_CASE("KL vanishes when the posterior copies the prior") {
    std::mt19937_64 rng(16);
    D2pccaModel m = make_model(small_spec(), rng);
    // Prior: zero mean, constant variance softplus(0.3) + floor in every chain.
    for (auto& t : m.transitions) {
        t.h.layers.back().weight.value.fill(0.0);
        t.h.layers.back().bias.value.fill(0.0);
        t.shortcut.weight.value.fill(0.0);
        t.shortcut.bias.value.fill(0.0);
        t.s_head.weight.value.fill(0.0);
        t.s_head.bias.value.fill(0.3);
    }
    for (Parameter* p : {&m.combiner.tanh_layer.weight, &m.combiner.mean_head.weight, &m.combiner.mean_head.bias,
                         &m.combiner.var_head.weight})
        p->value.fill(0.0);
    m.combiner.var_head.bias.value.fill(0.3);
    const SequenceBatch x = random_batch(rng, 3, 5, 5);
    GaussianNoise noise(17);
    Tape tape;
    const ElboTerms e = elbo(tape, m, x, noise);
    CHECK(e.kl.value().item() == 0.0);
}

TEST_CASE("beta one objective is the ELBO bit for bit") {
    std::mt19937_64 rng(18);
    const D2pccaModel m = make_model(small_spec(), rng);
    const SequenceBatch x = random_batch(rng, 4, 5, 5);
    GaussianNoise noise(19);
    Tape tape;
    const ElboTerms e = elbo(tape, m, x, noise);
    CHECK(e.objective.value().identical(e.elbo.value()));
    double total = 0.0;
    for (double v : e.per_sequence.values()) total += v;
    CHECK(total == doctest::Approx(e.elbo.value().item()).epsilon(1e-12));

    noise.rewind();
    Tape tape2;
    ElboOptions opt;
    opt.beta = 0.25;
    const ElboTerms annealed = elbo(tape2, m, x, noise, opt);
    CHECK(annealed.elbo.value().identical(e.elbo.value()));
    CHECK(annealed.objective.value().item() ==
          doctest::Approx(e.recon.value().item() - 0.25 * e.kl.value().item()).epsilon(1e-12));
}

TEST_CASE("ELBO gradient matches finite differences under frozen noise") {
    std::mt19937_64 rng(20);
    ModelSpec spec = small_spec(6);
    spec.obs_dims = {2, 2};
    D2pccaModel m = make_model(spec, rng);
    for (Parameter* p : m.parameters())
        for (double& v : p->value.values()) v += 0.05 * std::normal_distribution<double>(0.0, 1.0)(rng);
    const SequenceBatch x = random_batch(rng, 1, 4, 4);
    GaussianNoise noise(21);
    for (KlEstimator kl : {KlEstimator::Analytic, KlEstimator::Sampled}) {
        ElboOptions opt;
        opt.kl = kl;
        auto params = m.parameters();
        const double err = diff::grad_check(
            [&](Tape& tape) {
                noise.rewind();
                return elbo(tape, m, x, noise, opt).elbo;
            },
            params);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("single and many-sample ELBO estimates agree") {
    std::mt19937_64 rng(22);
    const D2pccaModel m = make_model(small_spec(), rng);
    const SequenceBatch x = random_batch(rng, 1, 5, 5);
    GaussianNoise noise(23);
    auto stats = [&](std::size_t samples, std::size_t reps) {
        double s = 0.0, s2 = 0.0;
        for (std::size_t r = 0; r < reps; ++r) {
            Tape tape;
            ElboOptions opt;
            opt.samples = samples;
            const double v = elbo(tape, m, x, noise, opt).elbo.value().item();
            s += v;
            s2 += v * v;
        }
        const double mean = s / static_cast<double>(reps);
        const double var = (s2 / static_cast<double>(reps) - mean * mean) * static_cast<double>(reps) /
                           static_cast<double>(reps - 1);
        return std::pair{mean, var / static_cast<double>(reps)};
    };
    const auto [m1, v1] = stats(1, 400);
    const auto [m64, v64] = stats(64, 20);
    CHECK(std::abs(m1 - m64) < 3.0 * std::sqrt(v1 + v64));
}

TEST_CASE("ELBO is a lower bound on the exact linear-Gaussian likelihood") {
    std::mt19937_64 rng(24);
    for (int trial = 0; trial < 10; ++trial) {
        const auto inst = linear_instance::make(small_spec(), rng);
        lds::SimulatedPath path;
        {
            std::mt19937_64 sim(100 + static_cast<std::uint64_t>(trial));
            path = lds::simulate(inst.params, 6, sim);
        }
        Tensor seq(Shape{6, 5});
        for (std::size_t t = 0; t < 6; ++t)
            for (std::size_t k = 0; k < 5; ++k)
                seq.at(t, k) = path.x(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k));
        const double exact = lds::kalman_filter(inst.params, path.x).log_likelihood;
        GaussianNoise noise(200 + static_cast<std::uint64_t>(trial));
        Tape tape;
        // 64 independent draws: the sequence replicated across the batch.
        std::vector<Tensor> copies(64, seq);
        const ElboTerms e = elbo(tape, inst.model, SequenceBatch::from_sequences(copies), noise);
        double s = 0.0, s2 = 0.0;
        for (double v : e.per_sequence.values()) {
            s += v;
            s2 += v * v;
        }
        const double mean = s / 64.0;
        const double se = std::sqrt((s2 / 64.0 - mean * mean) / 63.0);
        CHECK(mean <= exact + 1e-6 + 3.0 * se);
    }
}

TEST_CASE("posterior-mean reconstruction is the zero-noise path through the emission") {
    std::mt19937_64 rng(25);
    const D2pccaModel m = make_model(small_spec(), rng);
    const SequenceBatch x = random_batch(rng, 2, 4, 5);
    GaussianNoise noise(26);
    const Reconstruction r = reconstruct(m, x, ReconstructMode::PosteriorMean, noise);
    ZeroNoise zero;
    Tape tape;
    const PosteriorSample s = infer_posterior(tape, m, x, zero);
    for (std::size_t t = 0; t < 4; ++t) {
        std::vector<Var> means;
        for (const auto& h : emit_step(tape, m, s.z[t])) means.push_back(h.mean);
        CHECK(r.mean[t].identical(diff::concat(means).value()));
        for (double v : r.variance[t].values()) CHECK(v > 0.0);
    }
}

TEST_CASE("posterior-mean reconstruction is refused with a flow posterior") {
    std::mt19937_64 rng(27);
    ModelSpec spec = small_spec();
    spec.flow_layers = 2;
    const D2pccaModel m = make_model(spec, rng);
    const SequenceBatch x = random_batch(rng, 2, 4, 5);
    GaussianNoise noise(28);
    CHECK_THROWS_AS(reconstruct(m, x, ReconstructMode::PosteriorMean, noise), ConfigError);
    const Reconstruction r = reconstruct(m, x, ReconstructMode::Sampled, noise);
    CHECK(r.mean.size() == 4);
}

TEST_CASE("shape errors") {
    std::mt19937_64 rng(29);
    const D2pccaModel m = make_model(small_spec(), rng);
    Tape tape;
    CHECK_THROWS_AS(prior_step(tape, m, tape.constant(Tensor(Shape{2, 4}))), ShapeError);
    CHECK_THROWS_AS(emit_step(tape, m, tape.constant(Tensor(Shape{2, 6}))), ShapeError);
    GaussianNoise noise(1);
    CHECK_THROWS_AS(elbo(tape, m, random_batch(rng, 2, 3, 4), noise), ShapeError);
    ModelSpec bad = small_spec();
    bad.obs_dims = {3};
    CHECK_THROWS_AS(make_model(bad, rng), ConfigError);
}
