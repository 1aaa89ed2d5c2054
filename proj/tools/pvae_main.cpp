// pvae: command-line front end for the PatchVAE representation lab.
//
//   pvae <subcommand> --config <file> [--set key=value]... --out <dir>
//
// Subcommands: train, probe, viz-parts, crops, swap, recon-metrics,
// gradcheck, make-synth.

#include <CLI11.hpp>

#include <iostream>

#include "pvae/certify.hpp"
#include "pvae/config.hpp"
#include "pvae/trainer.hpp"
#include "pvae/viz.hpp"

namespace fs = std::filesystem;
using pvae::Tensor;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir = "out";
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = false) {
    auto* c = cmd->add_option("--config", args.config_path, "flat key=value config file");
    if (config_required) c->required();
    cmd->add_option("--set", args.overrides, "override, key=value (repeatable)");
    cmd->add_option("--out", args.out_dir, "output directory");
}

pvae::config::RunConfig resolve(const CommonArgs& args) {
    pvae::config::RunConfig cfg;
    if (!args.config_path.empty()) cfg = pvae::config::RunConfig::from_file(args.config_path);
    for (const std::string& kv : args.overrides) cfg.apply_override(kv);
    return cfg;
}

fs::path prepare_out(const CommonArgs& args, const pvae::config::RunConfig& cfg) {
    fs::path out(args.out_dir);
    fs::create_directories(out);
    cfg.write_snapshot(out / "config.resolved.cfg");
    return out;
}

int cmd_train(const CommonArgs& args) {
    auto cfg = resolve(args);
    fs::path out = prepare_out(args, cfg);
    pvae::data::Dataset ds = cfg.dataset();
    pvae::ModelConfig mc = cfg.model();
    pvae::train::TrainConfig tc = cfg.trainer();
    tc.log_progress = true;
    tc.checkpoint_dir = (out / "checkpoints").string();
    pvae::train::TrainState<float> state;
    if (mc.kind == pvae::ModelKind::patchvae) {
        pvae::PatchVaeModel<float> model(mc, cfg.model_seed());
        pvae::train::train(model, ds, tc, state);
        pvae::train::save_checkpoint(out / "model.ckpt", mc, model.params(), &state);
    } else {
        pvae::BetaVaeModel<float> model(mc, cfg.model_seed());
        pvae::train::train(model, ds, tc, state);
        pvae::train::save_checkpoint(out / "model.ckpt", mc, model.params(), &state);
    }
    pvae::train::write_history_csv(out / "history.csv", state.step_history);
    pvae::viz::emit_plots(out / "history.csv", out);
    std::cout << "trained " << pvae::to_string(mc.kind) << " for " << tc.epochs << " epochs ("
              << state.global_step << " steps); final epoch total "
              << state.epoch_history.back().total << "\n"
              << "checkpoint: " << (out / "model.ckpt").string() << "\n";
    return 0;
}

int cmd_probe(const CommonArgs& args, const std::string& checkpoint,
              const std::string& test_path) {
    auto cfg = resolve(args);
    fs::path out = prepare_out(args, cfg);
    auto cp = pvae::train::load_checkpoint<float>(checkpoint);
    pvae::data::Dataset train_ds = cfg.dataset();

    pvae::data::Dataset test_ds;
    std::string kind = cfg.get_str("data.kind", "");
    if (!test_path.empty()) {
        if (kind == "cifar")
            test_ds = pvae::data::load_cifar_binary(test_path, pvae::data::Split::test);
        else
            test_ds = pvae::data::load_dataset(test_path);
    } else {
        PVAE_CHECK(kind == "cifar",
                   "probe needs --test-path unless data.kind=cifar (test split is implied)");
        test_ds = pvae::data::load_cifar_binary(cfg.get_str("data.path", ""),
                                                pvae::data::Split::test);
        int limit = cfg.get_int("data.limit", 0);
        if (limit > 0) test_ds = test_ds.limit_per_class(limit);
    }

    pvae::probe::ProbeConfig pc = cfg.prober();
    if (pc.num_classes == 0)
        pc.num_classes = std::max(train_ds.num_classes, test_ds.num_classes);
    pc.log_progress = true;
    auto clf = pvae::probe::build_classifier(cp, pc);
    pvae::probe::EvalReport rep = pvae::probe::train_probe(clf, train_ds, test_ds);
    rep.to_csv(out / "eval_report.csv");
    std::ofstream(out / "eval_report.txt") << rep.to_text();
    std::cout << rep.to_text();
    return 0;
}

int cmd_viz_parts(const CommonArgs& args, const std::string& checkpoint) {
    auto cfg = resolve(args);
    fs::path out = prepare_out(args, cfg);
    auto cp = pvae::train::load_checkpoint<float>(checkpoint);
    PVAE_CHECK(cp.config.kind == pvae::ModelKind::patchvae,
               "viz-parts needs a patchvae checkpoint");
    auto model = pvae::train::patch_model_from_checkpoint(cp);
    pvae::data::Dataset ds = cfg.dataset();
    int samples = std::min(cfg.get_int("viz.samples", 8), ds.count());
    std::vector<int> idx(samples);
    std::iota(idx.begin(), idx.end(), 0);
    Tensor<float> images = pvae::data::gather_images<float>(ds, idx);
    Tensor<float> occ = pvae::viz::encode_occurrence_probs(model, images);
    float alpha = static_cast<float>(cfg.get_real("viz.alpha", 0.5));
    pvae::viz::save_image(out / "parts_panel.png",
                          pvae::viz::occurrence_panel(images, occ, alpha));
    std::cout << "wrote " << (out / "parts_panel.png").string() << " (" << cp.config.n_parts
              << " parts x " << samples << " samples)\n";
    return 0;
}

int cmd_crops(const CommonArgs& args, const std::string& checkpoint) {
    auto cfg = resolve(args);
    fs::path out = prepare_out(args, cfg);
    auto cp = pvae::train::load_checkpoint<float>(checkpoint);
    PVAE_CHECK(cp.config.kind == pvae::ModelKind::patchvae, "crops needs a patchvae checkpoint");
    auto model = pvae::train::patch_model_from_checkpoint(cp);
    pvae::data::Dataset ds = cfg.dataset();
    int part = cfg.get_int("viz.part", 0);
    int k = cfg.get_int("viz.k", 50);
    auto crops = pvae::viz::top_crops(model, ds, part, k);
    pvae::viz::save_image(out / ("crops_part" + std::to_string(part) + ".png"),
                          pvae::viz::crop_grid_panel(crops.crops));
    std::ofstream csv(out / "crops.csv");
    csv << "rank,image_index,cell_y,cell_x,score\n";
    for (size_t i = 0; i < crops.hits.size(); ++i)
        csv << i << "," << crops.hits[i].image_index << "," << crops.hits[i].cell_y << ","
            << crops.hits[i].cell_x << "," << crops.hits[i].score << "\n";
    std::cout << "wrote " << crops.crops.size() << " crops for part " << part << "\n";
    return 0;
}

int cmd_swap(const CommonArgs& args, const std::string& checkpoint) {
    auto cfg = resolve(args);
    fs::path out = prepare_out(args, cfg);
    auto cp = pvae::train::load_checkpoint<float>(checkpoint);
    PVAE_CHECK(cp.config.kind == pvae::ModelKind::patchvae, "swap needs a patchvae checkpoint");
    auto model = pvae::train::patch_model_from_checkpoint(cp);
    pvae::data::Dataset ds = cfg.dataset();
    int si = cfg.get_int("viz.source_index", 0);
    int ti = cfg.get_int("viz.target_index", 1);
    PVAE_CHECK(si < ds.count() && ti < ds.count(), "viz source/target index out of range");
    int sp = cfg.get_int("viz.source_part", 0);
    int tp = cfg.get_int("viz.target_part", 0);
    Tensor<float> src = ds.image(si), tgt = ds.image(ti);
    auto res = pvae::viz::swap_appearance(model, src, sp, tgt, tp);
    pvae::viz::save_image(out / "swap_source.png", src);
    pvae::viz::save_image(out / "swap_target.png", tgt);
    pvae::viz::save_image(out / "swap_original_recon.png", res.original);
    pvae::viz::save_image(out / "swap_swapped_recon.png", res.swapped);
    std::cout << "wrote swap reconstructions (source part " << sp << " -> target part " << tp
              << ")\n";
    return 0;
}

int cmd_recon_metrics(const CommonArgs& args, const std::string& checkpoint, int mask_panels) {
    auto cfg = resolve(args);
    fs::path out = prepare_out(args, cfg);
    auto cp = pvae::train::load_checkpoint<float>(checkpoint);
    pvae::data::Dataset ds = cfg.dataset();

    double sum_psnr = 0, sum_ssim = 0;
    int n = 0;
    auto batches = pvae::data::minibatches(ds.count(), 128, std::nullopt);
    auto eval_batch = [&](const Tensor<float>& x, const Tensor<float>& xhat) {
        const int B = x.dim(0), H = x.dim(1), W = x.dim(2);
        for (int b = 0; b < B; ++b) {
            Tensor<float> xi({H, W, 3}), ri({H, W, 3});
            std::copy_n(x.data() + (int64_t)b * H * W * 3, (int64_t)H * W * 3, xi.data());
            std::copy_n(xhat.data() + (int64_t)b * H * W * 3, (int64_t)H * W * 3, ri.data());
            sum_psnr += pvae::probe::psnr(xi, ri);
            sum_ssim += pvae::probe::ssim(xi, ri);
            ++n;
        }
    };
    if (cp.config.kind == pvae::ModelKind::patchvae) {
        auto model = pvae::train::patch_model_from_checkpoint(cp);
        for (auto& idx : batches) {
            Tensor<float> x = pvae::data::gather_images<float>(ds, idx);
            pvae::Tape<float> t(&model.params());
            auto fwd = model.forward(t, x, pvae::PatchNoise<float>::zero(cp.config, x.dim(0)),
                                     1.0f, pvae::nn::Mode::eval());
            eval_batch(x, t.val(fwd.xhat));
        }
    } else {
        auto model = pvae::train::beta_model_from_checkpoint(cp);
        for (auto& idx : batches) {
            Tensor<float> x = pvae::data::gather_images<float>(ds, idx);
            pvae::Tape<float> t(&model.params());
            auto fwd = model.forward(t, x, Tensor<float>::zeros({x.dim(0), cp.config.z_dim}),
                                     pvae::nn::Mode::eval());
            eval_batch(x, t.val(fwd.xhat));
        }
    }
    std::ofstream csv(out / "recon_metrics.csv");
    csv << "metric,value\npsnr," << sum_psnr / n << "\nssim," << sum_ssim / n << "\n";
    for (int i = 0; i < std::min(mask_panels, ds.count()); ++i)
        pvae::viz::save_weight_mask_panel(ds.image(i),
                                          out / ("mask_panel_" + std::to_string(i) + ".png"));
    std::cout << "psnr " << sum_psnr / n << " dB, ssim " << sum_ssim / n << " over " << n
              << " images\n";
    return 0;
}

int cmd_gradcheck(const CommonArgs& args, double tolerance, double step) {
    auto cfg = resolve(args);
    fs::path out = prepare_out(args, cfg);
    pvae::GradCheckOptions opt;
    opt.tolerance = tolerance;
    opt.step = step;
    auto summary = pvae::certify::run_full_certification(opt);
    std::ofstream csv(out / "gradcheck.csv");
    csv << "check,max_rel_err,pass\n";
    for (const auto& r : summary.reports) {
        std::cout << (r.report.pass ? "PASS" : "FAIL") << "  " << r.name << "  max_rel_err "
                  << r.report.worst() << "\n";
        csv << r.name << "," << r.report.worst() << "," << (r.report.pass ? 1 : 0) << "\n";
    }
    std::cout << (summary.pass ? "PASS" : "FAIL") << "  overall (tolerance " << tolerance
              << ", worst " << summary.worst << ")\n";
    return summary.pass ? 0 : 1;
}

int cmd_make_synth(const CommonArgs& args, const std::string& cifar_out) {
    auto cfg = resolve(args);
    fs::path out = prepare_out(args, cfg);
    pvae::data::SynthSpec spec = cfg.synth();
    pvae::data::SynthResult synth = pvae::data::make_synthetic(spec);
    std::map<std::string, std::string> manifest{
        {"canvas", std::to_string(spec.canvas)},
        {"motif_count", std::to_string(spec.motif_count)},
        {"motif_size", std::to_string(spec.motif_size)},
        {"motifs_per_image", std::to_string(spec.motifs_per_image)},
        {"noise_level", std::to_string(spec.noise_level)},
        {"count", std::to_string(spec.count)},
        {"seed", std::to_string(spec.seed)},
    };
    pvae::data::save_dataset(synth.data, synth.occupancy, manifest, out / "synth.pvae");
    if (!cifar_out.empty()) pvae::data::save_cifar_binary(synth.data, cifar_out);
    std::cout << "wrote " << synth.data.count() << " images (" << synth.data.num_classes
              << " classes) to " << (out / "synth.pvae").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PatchVAE representation lab"};
    app.require_subcommand(1);

    CommonArgs train_args, probe_args, parts_args, crops_args, swap_args, metrics_args,
        grad_args, synth_args;
    std::string probe_ckpt, parts_ckpt, crops_ckpt, swap_ckpt, metrics_ckpt;
    std::string probe_test_path, synth_cifar_out;
    double grad_tol = 1e-4, grad_step = 1e-5;
    int mask_panels = 4;

    auto* t = app.add_subcommand("train", "unsupervised training");
    add_common(t, train_args, true);

    auto* p = app.add_subcommand("probe", "classification probe on a trained trunk");
    add_common(p, probe_args, true);
    p->add_option("--checkpoint", probe_ckpt, "trained model checkpoint")->required();
    p->add_option("--test-path", probe_test_path, "held-out set (container or CIFAR dir)");

    auto* vp = app.add_subcommand("viz-parts", "occurrence heatmap panels");
    add_common(vp, parts_args, true);
    vp->add_option("--checkpoint", parts_ckpt)->required();

    auto* cr = app.add_subcommand("crops", "top patch crops per part");
    add_common(cr, crops_args, true);
    cr->add_option("--checkpoint", crops_ckpt)->required();

    auto* sw = app.add_subcommand("swap", "appearance swapping between images");
    add_common(sw, swap_args, true);
    sw->add_option("--checkpoint", swap_ckpt)->required();

    auto* rm = app.add_subcommand("recon-metrics", "PSNR/SSIM and weight-mask panels");
    add_common(rm, metrics_args, true);
    rm->add_option("--checkpoint", metrics_ckpt)->required();
    rm->add_option("--mask-panels", mask_panels, "weight-mask panels to render");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient certification");
    add_common(gc, grad_args);
    gc->add_option("--tolerance", grad_tol, "max relative error");
    gc->add_option("--step", grad_step, "finite-difference step");

    auto* ms = app.add_subcommand("make-synth", "generate the synthetic motif dataset");
    add_common(ms, synth_args);
    ms->add_option("--cifar-out", synth_cifar_out, "also export as a CIFAR binary batch file");

    CLI11_PARSE(app, argc, argv);

    try {
        if (t->parsed()) return cmd_train(train_args);
        if (p->parsed()) return cmd_probe(probe_args, probe_ckpt, probe_test_path);
        if (vp->parsed()) return cmd_viz_parts(parts_args, parts_ckpt);
        if (cr->parsed()) return cmd_crops(crops_args, crops_ckpt);
        if (sw->parsed()) return cmd_swap(swap_args, swap_ckpt);
        if (rm->parsed()) return cmd_recon_metrics(metrics_args, metrics_ckpt, mask_panels);
        if (gc->parsed()) return cmd_gradcheck(grad_args, grad_tol, grad_step);
        if (ms->parsed()) return cmd_make_synth(synth_args, synth_cifar_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
