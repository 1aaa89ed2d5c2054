#ifndef PVAE_TRAINER_HPP
#define PVAE_TRAINER_HPP

// Unsupervised training loop: ADAM over shuffled minibatches, relaxed
// Bernoulli temperature annealing, per-step metric history, and versioned
// checkpoints that resume bit-exactly.

#include <charconv>
#include <iomanip>

#include "pvae/data.hpp"
#include "pvae/losses.hpp"

namespace pvae::train {

struct TrainConfig {
    int epochs = 10;
    int batch_size = 128;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    dist::TemperatureSchedule schedule;  // tau0 1.0, rate 3e-5, floor 0.4
    losses::LossVariant loss = losses::LossVariant::plain;
    uint64_t seed = 1;
    int checkpoint_every = 0;        // epochs between checkpoints; 0 = final only
    std::string checkpoint_dir;      // empty = no periodic/diagnostic checkpoints
    bool log_progress = false;

    void validate() const {
        PVAE_CHECK(epochs >= 1 && batch_size >= 1, "epochs and batch size must be positive");
        PVAE_CHECK(lr >= 0.0, "learning rate must be nonnegative");
        PVAE_CHECK(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0,
                   "bad ADAM constants");
    }
};

template <typename T>
struct AdamState {
    std::map<std::string, Tensor<T>> m, v;
    int64_t t = 0;

    void ensure(const ParamStore<T>& store) {
        for (auto& [name, e] : store.entries()) {
            if (!e.trainable) continue;
            if (!m.count(name)) m.emplace(name, Tensor<T>::zeros(e.value.shape()));
            if (!v.count(name)) v.emplace(name, Tensor<T>::zeros(e.value.shape()));
        }
    }
};

// Bias-corrected ADAM update from the gradients currently in the store.
template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& moments, double lr, double beta1, double beta2,
               double eps, int64_t t) {
    PVAE_CHECK(t >= 1, "adam_step: t must be >= 1");
    moments.ensure(params);
    const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
    const T corr1 = static_cast<T>(1.0 - std::pow(beta1, static_cast<double>(t)));
    const T corr2 = static_cast<T>(1.0 - std::pow(beta2, static_cast<double>(t)));
    for (auto& [name, e] : params.entries()) {
        if (!e.trainable) continue;
        Tensor<T>& m = moments.m.at(name);
        Tensor<T>& v = moments.v.at(name);
        for (int64_t i = 0; i < e.value.numel(); ++i) {
            T g = e.grad[i];
            m[i] = b1 * m[i] + (T(1) - b1) * g;
            v[i] = b2 * v[i] + (T(1) - b2) * g * g;
            T mhat = m[i] / corr1;
            T vhat = v[i] / corr2;
            e.value[i] -= static_cast<T>(lr) * mhat / (std::sqrt(vhat) + static_cast<T>(eps));
        }
    }
}

struct MetricRow {
    int64_t step = 0;
    double recon = 0, kl_occ = 0, kl_app = 0, tau = 0;
};

template <typename T>
struct TrainState {
    AdamState<T> adam;
    int64_t global_step = 0;
    std::vector<MetricRow> step_history;
    std::vector<losses::LossBreakdown<T>> epoch_history;
};

class TrainDiverged : public Error {
public:
    TrainDiverged(int epoch, int batch, const std::string& msg)
        : Error(msg), epoch_index(epoch), batch_index(batch) {}
    int epoch_index;
    int batch_index;
};

// --- checkpoint container ---------------------------------------------------

inline void config_to_meta(const ModelConfig& c, io::ArrayFile& af) {
    af.set_meta("model.kind", to_string(c.kind));
    af.set_meta("model.n_parts", std::to_string(c.n_parts));
    af.set_meta("model.d_p", std::to_string(c.d_p));
    af.set_meta("model.d_e", std::to_string(c.d_e));
    af.set_meta("model.height", std::to_string(c.height));
    af.set_meta("model.width", std::to_string(c.width));
    std::ostringstream p;
    p << std::setprecision(17) << c.occurrence_prior() << " " << c.beta_app << " " << c.beta_occ
      << " " << c.beta;
    af.set_meta("model.reals", p.str());
    af.set_meta("model.z_dim", std::to_string(c.z_dim));
}

inline ModelConfig config_from_meta(const io::ArrayFile& af) {
    ModelConfig c;
    c.kind = model_kind_from_string(af.get_meta("model.kind"));
    c.n_parts = std::stoi(af.get_meta("model.n_parts"));
    c.d_p = std::stoi(af.get_meta("model.d_p"));
    c.d_e = std::stoi(af.get_meta("model.d_e"));
    c.height = std::stoi(af.get_meta("model.height"));
    c.width = std::stoi(af.get_meta("model.width"));
    std::istringstream p(af.get_meta("model.reals"));
    p >> c.p_prior >> c.beta_app >> c.beta_occ >> c.beta;
    c.z_dim = std::stoi(af.get_meta("model.z_dim"));
    return c;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const ParamStore<T>& params, const TrainState<T>* state) {
    io::ArrayFile af;
    af.set_meta("kind", "checkpoint");
    config_to_meta(cfg, af);
    for (auto& [name, e] : params.entries()) af.put("p." + name, e.value);
    if (state) {
        af.set_meta("global_step", std::to_string(state->global_step));
        af.set_meta("adam_t", std::to_string(state->adam.t));
        for (auto& [name, m] : state->adam.m) af.put("adam.m." + name, m);
        for (auto& [name, v] : state->adam.v) af.put("adam.v." + name, v);
        Tensor<double> hist({std::max<int>(1, static_cast<int>(state->step_history.size())), 5});
        for (size_t i = 0; i < state->step_history.size(); ++i) {
            const MetricRow& r = state->step_history[i];
            hist[i * 5 + 0] = static_cast<double>(r.step);
            hist[i * 5 + 1] = r.recon;
            hist[i * 5 + 2] = r.kl_occ;
            hist[i * 5 + 3] = r.kl_app;
            hist[i * 5 + 4] = r.tau;
        }
        af.set_meta("history_rows", std::to_string(state->step_history.size()));
        af.put("history", hist);
    } else {
        af.set_meta("global_step", "0");
    }
    af.save(path);
}

template <typename T>
struct CheckpointData {
    ModelConfig config;
    std::map<std::string, Tensor<T>> arrays;  // parameter and state tensors
    TrainState<T> state;
    bool has_optimizer = false;
};

template <typename T>
CheckpointData<T> load_checkpoint(const std::filesystem::path& path) {
    io::ArrayFile af = io::ArrayFile::load(path);
    PVAE_CHECK(af.get_meta("kind") == "checkpoint",
               "'" << path.string() << "' is a " << af.get_meta("kind") << ", not a checkpoint");
    CheckpointData<T> cp;
    cp.config = config_from_meta(af);
    cp.state.global_step = std::stoll(af.get_meta("global_step"));
    for (auto& [name, rec] : af.arrays()) {
        if (name.rfind("p.", 0) == 0) cp.arrays.emplace(name.substr(2), rec.template to<T>());
        else if (name.rfind("adam.m.", 0) == 0)
            cp.state.adam.m.emplace(name.substr(7), rec.template to<T>());
        else if (name.rfind("adam.v.", 0) == 0)
            cp.state.adam.v.emplace(name.substr(7), rec.template to<T>());
    }
    cp.has_optimizer = !cp.state.adam.m.empty();
    if (af.has_meta("adam_t")) cp.state.adam.t = std::stoll(af.get_meta("adam_t"));
    if (af.has("history")) {
        size_t rows = std::stoull(af.get_meta("history_rows"));
        Tensor<double> hist = af.template get<double>("history");
        for (size_t i = 0; i < rows; ++i) {
            MetricRow r;
            r.step = static_cast<int64_t>(hist[i * 5 + 0]);
            r.recon = hist[i * 5 + 1];
            r.kl_occ = hist[i * 5 + 2];
            r.kl_app = hist[i * 5 + 3];
            r.tau = hist[i * 5 + 4];
            cp.state.step_history.push_back(r);
        }
    }
    return cp;
}

// Copies checkpoint arrays into a live store; every name must match in shape.
template <typename T>
void restore_params(ParamStore<T>& store, const std::map<std::string, Tensor<T>>& arrays) {
    for (auto& [name, e] : store.entries()) {
        auto it = arrays.find(name);
        PVAE_CHECK(it != arrays.end(), "checkpoint is missing parameter '" << name << "'");
        PVAE_CHECK(it->second.shape() == e.value.shape(),
                   "checkpoint parameter '" << name << "' has shape "
                                            << shape_str(it->second.shape()) << ", model expects "
                                            << shape_str(e.value.shape()));
        e.value = it->second;
    }
}

template <typename T>
PatchVaeModel<T> patch_model_from_checkpoint(const CheckpointData<T>& cp) {
    PatchVaeModel<T> model(cp.config, /*seed=*/0);
    restore_params(model.params(), cp.arrays);
    return model;
}

template <typename T>
BetaVaeModel<T> beta_model_from_checkpoint(const CheckpointData<T>& cp) {
    BetaVaeModel<T> model(cp.config, /*seed=*/0);
    restore_params(model.params(), cp.arrays);
    return model;
}

// --- metric CSV --------------------------------------------------------------

inline void write_history_csv(const std::filesystem::path& path,
                              const std::vector<MetricRow>& rows) {
    std::ofstream f(path);
    PVAE_CHECK(f.good(), "cannot open '" << path.string() << "'");
    f << "step,recon,kl_occ,kl_app,tau\n";
    f << std::setprecision(17);
    for (const MetricRow& r : rows)
        f << r.step << "," << r.recon << "," << r.kl_occ << "," << r.kl_app << "," << r.tau << "\n";
}

inline std::vector<MetricRow> read_history_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    PVAE_CHECK(f.good(), "cannot open '" << path.string() << "'");
    std::string line;
    PVAE_CHECK(std::getline(f, line), "history CSV '" << path.string() << "' is empty");
    PVAE_CHECK(line == "step,recon,kl_occ,kl_app,tau",
               "history CSV header mismatch at line 1: '" << line << "'");
    std::vector<MetricRow> rows;
    int lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ss(line);
        MetricRow r;
        ss >> r.step >> r.recon >> r.kl_occ >> r.kl_app >> r.tau;
        PVAE_CHECK(!ss.fail(), "malformed history CSV at line " << lineno);
        rows.push_back(r);
    }
    return rows;
}

// --- the loop ----------------------------------------------------------------

namespace detail {

// One optimization step over a prepared batch; shared by both model kinds.
template <typename T, typename ForwardObjective>
losses::LossBreakdown<T> run_step(ParamStore<T>& store, TrainState<T>& state,
                                  const TrainConfig& cfg, ForwardObjective&& fwd_obj, int epoch,
                                  int batch_index) {
    Tape<T> tape(&store);
    losses::Objective<T> obj = fwd_obj(tape);
    if (!std::isfinite(static_cast<double>(obj.parts.total))) {
        throw TrainDiverged(epoch, batch_index,
                            "non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(batch_index));
    }
    store.zero_grads();
    tape.backward(obj.total);
    adam_step(store, state.adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, ++state.adam.t);
    return obj.parts;
}

}  // namespace detail

// Trains either model kind from state.global_step up to cfg.epochs. All
// randomness derives from (seed, epoch, step), so a resumed run replays an
// uninterrupted one exactly.
template <typename T, typename Model>
void train(Model& model, const data::Dataset& ds, const TrainConfig& cfg, TrainState<T>& state) {
    cfg.validate();
    PVAE_CHECK(ds.count() >= 1, "empty dataset");
    PVAE_CHECK(ds.height() == model.config().height && ds.width() == model.config().width,
               "dataset resolution " << ds.height() << "x" << ds.width()
                                     << " does not match model " << model.config().height << "x"
                                     << model.config().width);
    const int steps_per_epoch =
        (ds.count() + cfg.batch_size - 1) / cfg.batch_size;
    PVAE_CHECK(state.global_step % steps_per_epoch == 0,
               "resume step " << state.global_step << " is not an epoch boundary");
    int start_epoch = static_cast<int>(state.global_step / steps_per_epoch);
    state.adam.ensure(model.params());

    constexpr bool is_patch = std::is_same_v<Model, PatchVaeModel<T>>;

    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        auto batches =
            data::minibatches(ds.count(), cfg.batch_size,
                              splitmix64(cfg.seed ^ (0x73687566ULL + static_cast<uint64_t>(epoch))));
        losses::LossBreakdown<T> epoch_mean;
        for (size_t bi = 0; bi < batches.size(); ++bi) {
            Tensor<T> x = data::gather_images<T>(ds, batches[bi]);
            double tau = dist::temperature_at(cfg.schedule, state.global_step);
            std::mt19937_64 noise_rng =
                substream(cfg.seed, 0x6e6f6973ULL, static_cast<uint64_t>(state.global_step));

            losses::LossBreakdown<T> parts;
            try {
                if constexpr (is_patch) {
                    PatchNoise<T> noise = PatchNoise<T>::draw(model.config(), x.dim(0), noise_rng);
                    parts = detail::run_step(
                        model.params(), state, cfg,
                        [&](Tape<T>& t) {
                            auto fwd = model.forward(t, x, noise, static_cast<T>(tau),
                                                     nn::Mode::training());
                            return losses::patchvae_objective(t, x, fwd, model.config(), cfg.loss);
                        },
                        epoch, static_cast<int>(bi));
                } else {
                    Tensor<T> noise = randn<T>({x.dim(0), model.config().z_dim}, noise_rng);
                    parts = detail::run_step(
                        model.params(), state, cfg,
                        [&](Tape<T>& t) {
                            auto fwd = model.forward(t, x, noise, nn::Mode::training());
                            return losses::betavae_objective(t, x, fwd,
                                                             static_cast<T>(model.config().beta),
                                                             cfg.loss);
                        },
                        epoch, static_cast<int>(bi));
                }
            } catch (const TrainDiverged&) {
                if (!cfg.checkpoint_dir.empty()) {
                    std::filesystem::create_directories(cfg.checkpoint_dir);
                    save_checkpoint(std::filesystem::path(cfg.checkpoint_dir) /
                                        ("diverged_step_" + std::to_string(state.global_step) +
                                         ".ckpt"),
                                    model.config(), model.params(), &state);
                }
                throw;
            }

            state.step_history.push_back(MetricRow{state.global_step,
                                                   static_cast<double>(parts.recon),
                                                   static_cast<double>(parts.kl_occ),
                                                   static_cast<double>(parts.kl_app), tau});
            epoch_mean.recon += parts.recon;
            epoch_mean.kl_occ += parts.kl_occ;
            epoch_mean.kl_app += parts.kl_app;
            epoch_mean.total += parts.total;
            epoch_mean.w_app = parts.w_app;
            epoch_mean.w_occ = parts.w_occ;
            ++state.global_step;
        }
        T inv = T(1) / static_cast<T>(batches.size());
        epoch_mean.recon *= inv;
        epoch_mean.kl_occ *= inv;
        epoch_mean.kl_app *= inv;
        epoch_mean.total *= inv;
        state.epoch_history.push_back(epoch_mean);
        if (cfg.log_progress)
            std::cerr << "epoch " << epoch + 1 << "/" << cfg.epochs << " total "
                      << epoch_mean.total << " recon " << epoch_mean.recon << " kl_occ "
                      << epoch_mean.kl_occ << " kl_app " << epoch_mean.kl_app << "\n";
        if (!cfg.checkpoint_dir.empty() && cfg.checkpoint_every > 0 &&
            (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs) {
            std::filesystem::create_directories(cfg.checkpoint_dir);
            save_checkpoint(std::filesystem::path(cfg.checkpoint_dir) /
                                ("epoch_" + std::to_string(epoch + 1) + ".ckpt"),
                            model.config(), model.params(), &state);
        }
    }
}

}  // namespace pvae::train

#endif
