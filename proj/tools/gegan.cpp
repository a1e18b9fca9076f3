// gegan: train, verify, sample, interpolate, and evaluate group-equivariant
// GANs from a TOML run configuration.
//
// Exit codes: 0 ok, 1 runtime abort (e.g. non-finite loss), 2 config error,
// 3 verification failure.

#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "gegan/cli.hpp"

namespace {

void apply_thread_cap() {
    const char* env = std::getenv("GEGAN_THREADS");
    if (!env) return;
    try {
        const int n = std::stoi(env);
        if (n < 1) throw std::invalid_argument("non-positive");
        Eigen::setNbThreads(n);
    } catch (const std::exception&) {
        throw gegan::cli::ConfigError(
            std::string("GEGAN_THREADS: expected a positive integer, got `") +
            env + "`");
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"group-equivariant GAN toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "run configuration (TOML)")
            ->required();
        sub->add_option("--set", overrides,
                        "override a config key (dotted.key=value)");
    };

    auto* train = app.add_subcommand("train", "run adversarial training");
    add_config(train);

    auto* verify = app.add_subcommand(
        "verify", "check equivariance, invariance, and parameter budget");
    add_config(verify);
    std::string verify_ckpt;
    verify->add_option("--checkpoint", verify_ckpt,
                       "verify a saved checkpoint instead of a fresh model");

    auto* sample = app.add_subcommand("sample", "render a PNG sample grid");
    add_config(sample);
    std::string sample_ckpt, sample_out = "samples.png";
    std::int64_t sample_n = 64, sample_class = -1;
    double sample_sigma = 1.0;
    std::uint64_t sample_seed = 0;
    sample->add_option("--checkpoint", sample_ckpt, "trained checkpoint")
        ->required();
    sample->add_option("--n", sample_n, "number of samples");
    sample->add_option("--class", sample_class,
                       "fixed class id (-1 cycles classes)");
    sample->add_option("--sigma", sample_sigma, "truncation scale");
    sample->add_option("--seed", sample_seed, "sampling seed");
    sample->add_option("--out", sample_out, "output PNG path");

    auto* interp = app.add_subcommand("interpolate",
                                      "render an interpolation strip");
    add_config(interp);
    std::string interp_ckpt, interp_mode = "latent_slerp",
                interp_out = "interpolation.png";
    std::int64_t interp_y0 = 0, interp_y1 = 1, interp_steps = 8;
    std::uint64_t interp_seed = 0;
    interp->add_option("--checkpoint", interp_ckpt, "trained checkpoint")
        ->required();
    interp->add_option("--mode", interp_mode, "latent_slerp | class_linear");
    interp->add_option("--y0", interp_y0, "start class");
    interp->add_option("--y1", interp_y1, "end class");
    interp->add_option("--steps", interp_steps, "frames in the strip");
    interp->add_option("--seed", interp_seed, "latent seed");
    interp->add_option("--out", interp_out, "output PNG path");

    auto* eval = app.add_subcommand("eval", "Fréchet/kernel distance report");
    add_config(eval);
    std::string eval_ckpt, eval_out = "eval.txt";
    eval->add_option("--checkpoint", eval_ckpt, "trained checkpoint")
        ->required();
    eval->add_option("--out", eval_out, "report path");

    CLI11_PARSE(app, argc, argv);

    try {
        apply_thread_cap();
        const gegan::cli::RunConfig cfg =
            gegan::cli::load_config(config_path, overrides);
        if (train->parsed()) return gegan::cli::cmd_train(cfg, std::cout);
        if (verify->parsed())
            return gegan::cli::cmd_verify(
                cfg,
                verify_ckpt.empty() ? std::nullopt
                                    : std::optional<std::string>(verify_ckpt),
                std::cout);
        if (sample->parsed())
            return gegan::cli::cmd_sample(cfg, sample_ckpt, sample_n,
                                          sample_class, sample_sigma,
                                          sample_seed, sample_out, std::cout);
        if (interp->parsed())
            return gegan::cli::cmd_interpolate(cfg, interp_ckpt, interp_mode,
                                               interp_y0, interp_y1,
                                               interp_steps, interp_seed,
                                               interp_out, std::cout);
        if (eval->parsed())
            return gegan::cli::cmd_eval(cfg, eval_ckpt, eval_out, std::cout);
    } catch (const gegan::cli::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const gegan::cli::VerifyFailure& e) {
        std::cerr << "verification failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
