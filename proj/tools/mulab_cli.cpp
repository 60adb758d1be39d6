#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mulab/experiment.hpp"

namespace {

struct CliOptions {
    std::string config_path;
    std::string out_override;
    std::string seeds_csv;
    std::size_t jobs = 1;
};

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
    std::vector<std::uint64_t> seeds;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= csv.size(); ++i) {
        if (i < csv.size() && csv[i] != ',') continue;
        const std::string part = csv.substr(start, i - start);
        start = i + 1;
        if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
            throw mulab::ConfigError("--seeds expects comma-separated non-negative integers, got '" +
                                     part + "'");
        }
        seeds.push_back(std::stoull(part));
    }
    return seeds;
}

int run_pipeline(const CliOptions& opt, mulab::Stage stage, bool render) {
    std::string digest;
    mulab::ExperimentConfig cfg = mulab::load_experiment(opt.config_path, &digest);
    if (!opt.out_override.empty()) cfg.out_dir = opt.out_override;
    if (!opt.seeds_csv.empty()) cfg.seeds = parse_seed_list(opt.seeds_csv);
    std::cout << "run '" << cfg.run_id << "' -> " << cfg.out_dir << " (config "
              << digest.substr(0, 12) << ", " << cfg.seeds.size() << " seeds, " << opt.jobs
              << (opt.jobs == 1 ? " worker)" : " workers)") << "\n";
    mulab::run_experiment(cfg, digest, stage, std::cout, opt.jobs);
    if (render) {
        std::cout << "\n";
        mulab::render_report(cfg.out_dir, std::cout);
    }
    std::cout << "artifacts under " << cfg.out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"machine-unlearning lab: train, unlearn, and compare against retraining"};
    app.require_subcommand(1);

    CliOptions opt;
    std::string report_dir;

    auto add_common = [&opt](CLI::App* sub) {
        sub->add_option("-c,--config", opt.config_path, "experiment config file")->required();
        sub->add_option("-o,--out", opt.out_override, "override the configured output directory");
        sub->add_option("-s,--seeds", opt.seeds_csv, "override seeds, e.g. 0,1,2");
        sub->add_option("-j,--jobs", opt.jobs, "worker threads for independent cells");
        return sub;
    };

    CLI::App* pretrain =
        add_common(app.add_subcommand("pretrain", "train the Original and Retrain checkpoints"));
    CLI::App* unlearn =
        add_common(app.add_subcommand("unlearn", "run every configured unlearning method"));
    CLI::App* metrics =
        add_common(app.add_subcommand("metrics", "compute accuracy, attack, and divergence metrics"));
    CLI::App* idi = add_common(
        app.add_subcommand("idi", "estimate layer information curves and the difference index"));
    CLI::App* all =
        add_common(app.add_subcommand("all", "full pipeline plus the rendered comparison"));
    CLI::App* report =
        app.add_subcommand("report", "render the comparison table from existing results");
    report->add_option("-c,--config", opt.config_path, "config whose out_dir holds the results");
    report->add_option("-o,--out", report_dir, "results directory to render");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(pretrain)) return run_pipeline(opt, mulab::Stage::pretrain, false);
        if (app.got_subcommand(unlearn)) return run_pipeline(opt, mulab::Stage::unlearn, false);
        if (app.got_subcommand(metrics)) return run_pipeline(opt, mulab::Stage::metrics, false);
        if (app.got_subcommand(idi)) return run_pipeline(opt, mulab::Stage::idi, false);
        if (app.got_subcommand(all)) return run_pipeline(opt, mulab::Stage::all, true);
        if (app.got_subcommand(report)) {
            std::string dir = report_dir;
            if (dir.empty()) {
                if (opt.config_path.empty()) {
                    throw mulab::ConfigError("report needs --out or --config");
                }
                dir = mulab::load_experiment(opt.config_path).out_dir;
            }
            mulab::render_report(dir, std::cout);
            return 0;
        }
    } catch (const mulab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const mulab::CheckpointError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const mulab::NumericalAbort& e) {
        std::cerr << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
