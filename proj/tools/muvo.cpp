// muvo: dataset generation, training, evaluation, gradient checking and
// checkpoint inspection.
//
// Exit codes: 0 success, 1 validation error (bad config, bad arguments,
// corrupt inputs), 2 runtime error (I/O, divergence, failed gradcheck).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "muvo/checkpoint.hpp"
#include "muvo/config.hpp"
#include "muvo/files.hpp"
#include "muvo/gradcheck.hpp"
#include "muvo/report.hpp"
#include "muvo/trainer.hpp"

extern char** environ;

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

std::vector<std::pair<std::string, std::string>> muvo_environment() {
    std::vector<std::pair<std::string, std::string>> out;
    for (char** e = environ; e && *e; ++e) {
        std::string kv(*e);
        if (kv.rfind("MUVO_", 0) != 0) continue;
        const auto eq = kv.find('=');
        if (eq == std::string::npos) continue;
        out.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Config file (if any), then MUVO_* environment overrides.
json user_config(const std::string& path) {
    json user = path.empty() ? json::object() : muvo::read_json_file(path);
    return muvo::apply_env_overrides(std::move(user), muvo_environment());
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

int cmd_generate(const std::string& config_path, const std::string& out_dir) {
    const auto cfg = muvo::parse_config(user_config(config_path));
    const auto manifest = muvo::write_dataset_dir(out_dir, cfg.data);
    std::cout << "out_dir=" << out_dir << '\n'
              << "seed=" << manifest["seed"].get<std::uint64_t>() << '\n'
              << "labeled_target_rows=" << manifest["labeled_target_rows"].get<std::size_t>() << '\n'
              << "unlabeled_target_rows=" << manifest["unlabeled_target_rows"].get<std::size_t>() << '\n';
    for (const auto& [name, entry] : manifest["files"].items())
        std::cout << "sha256[" << name << "]=" << entry["sha256"].get<std::string>() << '\n';
    return kExitOk;
}

struct TrainArgs {
    std::string config;
    std::string data;
    std::string out;
    std::optional<std::string> ablate;
    std::optional<std::size_t> iters;
};

int cmd_train(const TrainArgs& args) {
    json user = user_config(args.config);
    if (args.ablate) user["trainer"]["ablate"] = split_list(*args.ablate);
    if (args.iters) {
        user["trainer"]["iters"] = *args.iters;
        const auto warmup = muvo::parse_config(json::object()).train.trainer.warmup;
        const auto requested = user.contains("trainer") && user["trainer"].contains("warmup")
                                   ? user["trainer"]["warmup"].get<std::size_t>()
                                   : warmup;
        if (requested > *args.iters) {
            std::cerr << "note: trainer.warmup lowered from " << requested << " to " << *args.iters
                      << " to fit --iters\n";
            user["trainer"]["warmup"] = *args.iters;
        }
    }

    auto loaded = muvo::load_dataset_dir(args.data);
    // The dataset on disk is authoritative; its spec replaces any data
    // section so the echoed config describes what was actually trained on.
    user["data"] = muvo::to_json(loaded.spec);
    const auto cfg = muvo::parse_config(user);

    const fs::path out(args.out);
    muvo::ensure_directory(out);
    const json resolved = muvo::to_json(cfg);
    muvo::write_file_bytes(out / "config.json", resolved.dump(2) + "\n");
    json run;
    run["code_version"] = muvo::kCodeVersion;
    run["code_hash"] = muvo::git_blob_hash(muvo::kCodeVersion);
    run["config"] = "config.json";
    run["config_sha256"] = muvo::sha256_hex(resolved.dump(2) + "\n");
    run["dataset_dir"] = fs::absolute(args.data).lexically_normal().string();
    run["dataset_hashes"] = muvo::dataset_hashes(loaded.manifest);
    muvo::write_file_bytes(out / "run_manifest.json", run.dump(2) + "\n");

    std::ofstream metrics(out / cfg.output.metrics, std::ios::binary);
    std::ofstream summary(out / cfg.output.summary, std::ios::binary);
    if (!metrics || !summary) throw muvo::IoError("cannot open metrics or summary file in '" + out.string() + "'");
    summary << muvo::kSummaryHeader << '\n';

    muvo::Trainer trainer(cfg.train, std::move(loaded.data));
    const bool has_val = !trainer.data().target_val.empty();
    double best_score = -1.0;
    std::size_t best_iteration = 0;
    muvo::RunResult result;
    try {
        result = trainer.run([&](const muvo::EvalRecord& rec) {
            metrics << to_json(rec).dump() << '\n';
            muvo::write_summary_row(summary, rec);
            metrics.flush();
            summary.flush();
            // Same rule as the trainer: strictly better validation accuracy.
            const double score = has_val ? rec.val.accuracy : static_cast<double>(rec.iteration);
            if (score > best_score) {
                best_score = score;
                best_iteration = rec.iteration;
                muvo::save_checkpoint((out / cfg.output.best_checkpoint).string(), muvo::Checkpoint::from(trainer));
            }
        });
    } catch (const muvo::TrainingDiverged& e) {
        std::cerr << "error: training diverged: " << e.what() << '\n'
                  << "completed iterations: " << trainer.iteration() << '\n';
        return kExitRuntime;
    }
    muvo::save_checkpoint((out / cfg.output.final_checkpoint).string(), muvo::Checkpoint::from(trainer));
    if (!metrics || !summary) throw muvo::IoError("failed writing metrics in '" + out.string() + "'");

    const auto& best = result.best();
    const auto& fin = result.final();
    std::cout << "iterations=" << trainer.iteration() << '\n'
              << "best_iteration=" << best_iteration << '\n'
              << "best_val_accuracy=" << muvo::format_double(best.val.accuracy) << '\n'
              << "best_test_accuracy=" << muvo::format_double(best.test.accuracy) << '\n'
              << "final_test_accuracy=" << muvo::format_double(fin.test.accuracy) << '\n'
              << "final_test_recall_std=" << muvo::format_double(fin.test.recall_std) << '\n';
    return kExitOk;
}

int cmd_gradcheck(const std::string& config_path, std::uint64_t seed, const std::string& fault) {
    const auto cfg = muvo::parse_config(user_config(config_path));
    muvo::GradcheckOptions opt;
    opt.seed = seed;
    opt.arch.activation = cfg.train.model.activation;
    if (!fault.empty()) {
        bool found = false;
        for (std::size_t i = 0; i < muvo::kTermCount; ++i)
            if (fault == muvo::kTermNames[i]) {
                opt.inject_fault = static_cast<muvo::Term>(i);
                found = true;
            }
        if (!found) throw muvo::UsageError("--inject-fault expects one of sup, dcl, ncl, con, ctr, clu");
    }
    const auto report = muvo::run_gradcheck(opt);
    std::vector<std::string> failed;
    for (const auto& row : report.rows) {
        std::cout << row.name << " max_rel_error=" << muvo::format_double(row.max_rel_error)
                  << " loss=" << muvo::format_double(row.loss) << " status=" << (row.passed ? "pass" : "FAIL") << '\n';
        if (!row.passed) failed.push_back(row.name);
    }
    if (failed.empty()) return kExitOk;
    std::cerr << "error: gradient check failed for:";
    for (const auto& f : failed) std::cerr << ' ' << f;
    std::cerr << '\n';
    return kExitRuntime;
}

int cmd_inspect(const std::string& path) {
    const auto ck = muvo::load_checkpoint(path);
    const auto& a = ck.network.architecture();
    std::cout << "iteration=" << ck.iteration << '\n'
              << "optimizer_steps=" << ck.optimizer_steps << '\n'
              << "schedule_refreshed=" << (ck.schedule_refreshed ? 1 : 0) << '\n'
              << "num_classes=" << a.num_classes << '\n'
              << "feature_dim=" << a.feature_dim << '\n'
              << "queue_capacity=" << ck.source_bank.capacity() << '\n';
    for (std::size_t c = 0; c < a.num_classes; ++c) std::cout << "theta[" << c << "]=" << muvo::format_double(ck.confidence.theta()[c]) << '\n';
    for (std::size_t c = 0; c < a.num_classes; ++c)
        std::cout << "prototype_initialized[" << c << "]=" << (ck.prototypes.initialized(c) ? 1 : 0) << '\n'
                  << "prototype_norm[" << c << "]=" << muvo::format_double(muvo::l2_norm(ck.prototypes.prototype(c)))
                  << '\n';
    for (std::size_t c = 0; c < a.num_classes; ++c) std::cout << "queue_occupancy[" << c << "]=" << ck.source_bank.occupancy(c) << '\n';
    return kExitOk;
}

int cmd_evaluate(const std::string& ckpt, const std::string& data_dir, const std::string& split) {
    const auto ck = muvo::load_checkpoint(ckpt);
    const auto loaded = muvo::load_dataset_dir(data_dir);
    const auto& td = loaded.data;
    if (ck.network.architecture().input_dim != loaded.spec.input_dim ||
        ck.network.architecture().num_classes != loaded.spec.num_classes)
        throw muvo::InvalidInput("checkpoint architecture does not match the dataset");
    const std::vector<muvo::Sample>* set = nullptr;
    if (split == "test") set = &td.target_test;
    else if (split == "val") set = &td.target_val;
    else if (split == "source") set = &td.source;
    else throw muvo::UsageError("--split expects test, val or source");
    if (set->empty()) throw muvo::InvalidInput("split '" + split + "' is empty");
    const auto r = muvo::evaluate(ck.network, *set);
    std::cout << "split=" << split << '\n'
              << "count=" << r.count << '\n'
              << "accuracy=" << muvo::format_double(r.accuracy) << '\n'
              << "macro_recall=" << muvo::format_double(r.macro_recall) << '\n'
              << "recall_std=" << muvo::format_double(r.recall_std) << '\n';
    for (std::size_t c = 0; c < r.recall.size(); ++c) std::cout << "recall[" << c << "]=" << muvo::format_double(r.recall[c]) << '\n';
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MuVo semi-supervised domain adaptation on synthetic data"};
    app.require_subcommand(1);

    std::string config;
    std::string out_dir;
    auto* gen = app.add_subcommand("generate", "Write a synthetic dataset directory");
    gen->add_option("-c,--config", config, "JSON config (data section is used)");
    gen->add_option("-o,--out", out_dir, "Output directory")->required();

    TrainArgs targs;
    auto* train = app.add_subcommand("train", "Train on a dataset directory");
    train->add_option("-c,--config", targs.config, "JSON config");
    train->add_option("-d,--data", targs.data, "Dataset directory written by generate")->required();
    train->add_option("-o,--out", targs.out, "Run directory")->required();
    train->add_option("--ablate", targs.ablate, "Comma-separated losses to disable (dcl,ncl,con,cda)");
    train->add_option("--iters", targs.iters, "Override trainer.iters");

    std::string gc_config;
    std::uint64_t gc_seed = 42;
    std::string fault;
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every loss gradient");
    gc->add_option("-c,--config", gc_config, "JSON config (model.activation is used)");
    gc->add_option("--seed", gc_seed, "Seed of the tiny instance");
    gc->add_option("--inject-fault", fault)->group("");

    std::string ckpt;
    auto* insp = app.add_subcommand("inspect", "Print checkpoint state as key=value lines");
    insp->add_option("checkpoint", ckpt, "Checkpoint file")->required();

    std::string ev_ckpt;
    std::string ev_data;
    std::string ev_split = "test";
    auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint on a dataset split");
    ev->add_option("checkpoint", ev_ckpt, "Checkpoint file")->required();
    ev->add_option("-d,--data", ev_data, "Dataset directory")->required();
    ev->add_option("--split", ev_split, "test, val or source");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (*gen) return cmd_generate(config, out_dir);
        if (*train) return cmd_train(targs);
        if (*gc) return cmd_gradcheck(gc_config, gc_seed, fault);
        if (*insp) return cmd_inspect(ckpt);
        if (*ev) return cmd_evaluate(ev_ckpt, ev_data, ev_split);
    } catch (const muvo::IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    } catch (const muvo::TrainingDiverged& e) {
        std::cerr << "error: training diverged: " << e.what() << '\n';
        return kExitRuntime;
    } catch (const muvo::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    }
    return kExitValidation;
}
