#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "commands.hpp"

using namespace d2pcca;

namespace {

struct CommonFlags {
    std::string config;
    cli::Overrides overrides;
    std::uint64_t seed = 0;
    std::string out, variant, data;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config, "JSON run config; omitted keys take the published defaults");
    cmd->add_option("--seed", f.seed, "random seed");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--variant", f.variant, "dpcca-em, d2pcca, d2pcca+kl, d2pcca+iaf, or d2pcca+kl+iaf");
    cmd->add_option("--data", f.data, "directory holding table.csv and manifest.json");
}

cli::RunConfig resolve(CLI::App* cmd, const CommonFlags& f) {
    cli::RunConfig c = f.config.empty() ? cli::RunConfig{} : cli::read_config(f.config);
    cli::Overrides o;
    if (cmd->count("--seed")) o.seed = f.seed;
    if (cmd->count("--out")) o.out = f.out;
    if (cmd->count("--variant")) o.variant = f.variant;
    if (cmd->count("--data")) o.data_dir = f.data;
    if (const char* w = std::getenv("D2PCCA_WORKERS")) o.workers = std::string(w);
    cli::apply_overrides(c, o);
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deep probabilistic CCA for multiset time series (D2PCCA).\n"
                 "Environment: D2PCCA_WORKERS sets the number of gradient worker threads."};
    app.require_subcommand(1);

    CommonFlags sim_f, train_f, em_f, eval_f, rec_f;
    std::string resume, rec_checkpoint;
    std::vector<std::string> eval_checkpoints;
    std::size_t window = 0;

    auto* sim = app.add_subcommand("simulate", "write a synthetic panel from the config's generator section");
    add_common(sim, sim_f);
    auto* train = app.add_subcommand("train", "train the configured variant");
    add_common(train, train_f);
    train->add_option("--resume", resume, "checkpoint to continue from (last.ckpt of an earlier run)");
    auto* em = app.add_subcommand("em-baseline", "fit the linear DPCCA baseline with EM");
    add_common(em, em_f);
    auto* eval = app.add_subcommand("eval", "test ELBO per step and RMSE for each checkpoint");
    add_common(eval, eval_f);
    eval->add_option("--checkpoint", eval_checkpoints, "checkpoint(s), evaluated in the order given")->required();
    auto* rec = app.add_subcommand("reconstruct", "export reconstruction bands for one test window");
    add_common(rec, rec_f);
    rec->add_option("--checkpoint", rec_checkpoint, "checkpoint to reconstruct with")->required();
    rec->add_option("--window", window, "test window index (default: eval.window)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : cli::kExitConfig;
    }

    try {
        if (sim->parsed()) {
            cli::cmd_simulate(resolve(sim, sim_f));
        } else if (train->parsed()) {
            const auto c = resolve(train, train_f);
            cli::cmd_train(c, resume.empty() ? std::nullopt : std::optional<std::filesystem::path>(resume));
        } else if (em->parsed()) {
            cli::cmd_em_baseline(resolve(em, em_f));
        } else if (eval->parsed()) {
            cli::cmd_eval(resolve(eval, eval_f), eval_checkpoints);
        } else if (rec->parsed()) {
            const auto c = resolve(rec, rec_f);
            cli::cmd_reconstruct(c, rec_checkpoint, rec->count("--window") ? window : c.eval.window);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return cli::exit_code(e);
    }
    return 0;
}
