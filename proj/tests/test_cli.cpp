// End-to-end smoke of the pvae command-line tool: every subcommand runs on a
// small synthetic workflow and leaves the promised artifacts behind.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>

namespace fs = std::filesystem;

namespace {

const char* kCli = PVAE_CLI_PATH;

struct Workspace {
    fs::path root;
    Workspace() {
        root = fs::temp_directory_path() / ("pvae_cli_" + std::to_string(std::random_device{}()));
        fs::create_directories(root);
    }
    ~Workspace() { fs::remove_all(root); }
};

int run(const std::string& args) {
    std::string cmd = std::string(kCli) + " " + args + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

}  // namespace

TEST(Cli, FullWorkflow) {
    Workspace ws;
    fs::path cfg = ws.root / "run.cfg";
    {
        std::ofstream f(cfg);
        f << "# desk-scale smoke configuration\n"
          << "model.kind = patchvae\n"
          << "model.n_parts = 2\n"
          << "model.d_p = 2\n"
          << "model.d_e = 8\n"
          << "model.height = 32\n"
          << "model.width = 32\n"
          << "train.epochs = 1\n"
          << "train.batch_size = 16\n"
          << "train.seed = 3\n"
          << "data.kind = synth\n"
          << "synth.count = 48\n"
          << "synth.motif_count = 2\n"
          << "synth.motifs_per_image = 1\n"
          << "synth.seed = 9\n";
    }

    // make-synth: container plus CIFAR-binary export
    fs::path synth_out = ws.root / "synth";
    ASSERT_EQ(run("make-synth --config " + cfg.string() + " --out " + synth_out.string() +
                  " --cifar-out " + (ws.root / "synth_train.bin").string()),
              0);
    EXPECT_TRUE(fs::exists(synth_out / "synth.pvae"));
    EXPECT_TRUE(fs::exists(synth_out / "config.resolved.cfg"));
    EXPECT_TRUE(fs::exists(ws.root / "synth_train.bin"));

    // train: checkpoint, history, plots, resolved config snapshot
    fs::path train_out = ws.root / "train";
    ASSERT_EQ(run("train --config " + cfg.string() + " --out " + train_out.string()), 0);
    EXPECT_TRUE(fs::exists(train_out / "model.ckpt"));
    EXPECT_TRUE(fs::exists(train_out / "history.csv"));
    EXPECT_TRUE(fs::exists(train_out / "loss_curves.png"));
    EXPECT_TRUE(fs::exists(train_out / "tau_schedule.png"));
    EXPECT_TRUE(fs::exists(train_out / "config.resolved.cfg"));

    std::string ckpt = (train_out / "model.ckpt").string();

    // viz-parts
    fs::path parts_out = ws.root / "parts";
    ASSERT_EQ(run("viz-parts --config " + cfg.string() + " --set viz.samples=4 --checkpoint " +
                  ckpt + " --out " + parts_out.string()),
              0);
    EXPECT_TRUE(fs::exists(parts_out / "parts_panel.png"));

    // crops
    fs::path crops_out = ws.root / "crops";
    ASSERT_EQ(run("crops --config " + cfg.string() +
                  " --set viz.part=1 --set viz.k=12 --checkpoint " + ckpt + " --out " +
                  crops_out.string()),
              0);
    EXPECT_TRUE(fs::exists(crops_out / "crops_part1.png"));
    EXPECT_TRUE(fs::exists(crops_out / "crops.csv"));

    // swap
    fs::path swap_out = ws.root / "swap";
    ASSERT_EQ(run("swap --config " + cfg.string() +
                  " --set viz.source_index=0 --set viz.target_index=1 --checkpoint " + ckpt +
                  " --out " + swap_out.string()),
              0);
    EXPECT_TRUE(fs::exists(swap_out / "swap_original_recon.png"));
    EXPECT_TRUE(fs::exists(swap_out / "swap_swapped_recon.png"));

    // recon-metrics (with weight-mask panels)
    fs::path metrics_out = ws.root / "metrics";
    ASSERT_EQ(run("recon-metrics --config " + cfg.string() + " --checkpoint " + ckpt +
                  " --mask-panels 2 --out " + metrics_out.string()),
              0);
    EXPECT_TRUE(fs::exists(metrics_out / "recon_metrics.csv"));
    EXPECT_TRUE(fs::exists(metrics_out / "mask_panel_0.png"));

    // probe on the exported CIFAR file (train and test share it at desk scale)
    fs::path probe_out = ws.root / "probe";
    ASSERT_EQ(run("probe --config " + cfg.string() +
                  " --set data.kind=cifar --set data.path=" +
                  (ws.root / "synth_train.bin").string() +
                  " --set probe.epochs=1 --set probe.batch_size=16 --checkpoint " + ckpt +
                  " --test-path " + (ws.root / "synth_train.bin").string() + " --out " +
                  probe_out.string()),
              0);
    EXPECT_TRUE(fs::exists(probe_out / "eval_report.csv"));
    EXPECT_TRUE(fs::exists(probe_out / "eval_report.txt"));
}

TEST(Cli, UnknownConfigKeyIsRejected) {
    Workspace ws;
    fs::path cfg = ws.root / "bad.cfg";
    std::ofstream(cfg) << "model.kind = patchvae\nmodel.bogus_knob = 7\n";
    EXPECT_NE(run("train --config " + cfg.string() + " --out " + (ws.root / "o").string()), 0);
    // overrides go through the same validation
    fs::path ok = ws.root / "ok.cfg";
    std::ofstream(ok) << "model.kind = patchvae\n";
    EXPECT_NE(run("train --config " + ok.string() + " --set nope=1 --out " +
                  (ws.root / "o2").string()),
              0);
}

TEST(Cli, GradcheckSubcommandReportsPass) {
    Workspace ws;
    ASSERT_EQ(run("gradcheck --out " + (ws.root / "gc").string()), 0);
    EXPECT_TRUE(fs::exists(ws.root / "gc" / "gradcheck.csv"));
}
