#ifndef PVAE_CONFIG_HPP
#define PVAE_CONFIG_HPP

// Flat key=value run configuration mirroring ModelConfig / TrainConfig /
// ProbeConfig / SynthSpec. Unknown keys are rejected; every run can write a
// resolved snapshot of the values it actually used.

#include <set>

#include "pvae/data.hpp"
#include "pvae/probe.hpp"

namespace pvae::config {

inline const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "model.kind", "model.n_parts", "model.d_p", "model.d_e", "model.height", "model.width",
        "model.p_prior", "model.beta_app", "model.beta_occ", "model.beta", "model.z_dim",
        "model.seed",
        "train.epochs", "train.batch_size", "train.lr", "train.beta1", "train.beta2", "train.eps",
        "train.tau0", "train.tau_rate", "train.tau_min", "train.loss", "train.seed",
        "train.checkpoint_every",
        "probe.freeze", "probe.hidden", "probe.num_classes", "probe.lr", "probe.momentum",
        "probe.decay_every", "probe.decay_factor", "probe.epochs", "probe.batch_size",
        "probe.seed",
        "data.kind", "data.path", "data.split", "data.size", "data.limit",
        "synth.canvas", "synth.motif_count", "synth.motif_size", "synth.motifs_per_image",
        "synth.noise_level", "synth.count", "synth.seed",
        "viz.samples", "viz.part", "viz.k", "viz.alpha", "viz.source_index", "viz.target_index",
        "viz.source_part", "viz.target_part",
    };
    return keys;
}

class RunConfig {
public:
    static RunConfig from_file(const std::filesystem::path& path) {
        std::ifstream f(path);
        PVAE_CHECK(f.good(), "cannot open config '" << path.string() << "'");
        RunConfig c;
        std::string line;
        int lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            auto strip = [](std::string s) {
                size_t a = s.find_first_not_of(" \t\r");
                if (a == std::string::npos) return std::string();
                size_t b = s.find_last_not_of(" \t\r");
                return s.substr(a, b - a + 1);
            };
            line = strip(line);
            if (line.empty()) continue;
            size_t eq = line.find('=');
            PVAE_CHECK(eq != std::string::npos,
                       path.string() << ":" << lineno << ": expected key=value, got '" << line
                                     << "'");
            c.set(strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
        }
        return c;
    }

    void set(const std::string& key, const std::string& value) {
        PVAE_CHECK(known_keys().count(key), "unknown config key '" << key << "'");
        kv_[key] = value;
    }

    // "key=value" override, as supplied on the command line.
    void apply_override(const std::string& kv) {
        size_t eq = kv.find('=');
        PVAE_CHECK(eq != std::string::npos, "override '" << kv << "' is not key=value");
        set(kv.substr(0, eq), kv.substr(eq + 1));
    }

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& dflt) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? dflt : it->second;
    }
    int get_int(const std::string& key, int dflt) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        try {
            return std::stoi(it->second);
        } catch (...) {
            throw Error("config key '" + key + "': '" + it->second + "' is not an integer");
        }
    }
    double get_real(const std::string& key, double dflt) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        try {
            return std::stod(it->second);
        } catch (...) {
            throw Error("config key '" + key + "': '" + it->second + "' is not a number");
        }
    }
    uint64_t get_seed(const std::string& key, uint64_t dflt) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        return std::stoull(it->second);
    }

    ModelConfig model() const {
        ModelConfig c;
        c.kind = model_kind_from_string(get_str("model.kind", "patchvae"));
        c.n_parts = get_int("model.n_parts", c.n_parts);
        c.d_p = get_int("model.d_p", c.d_p);
        c.d_e = get_int("model.d_e", c.d_e);
        c.height = get_int("model.height", c.height);
        c.width = get_int("model.width", c.width);
        c.p_prior = get_real("model.p_prior", 0.0);
        c.beta_app = get_real("model.beta_app", c.beta_app);
        c.beta_occ = get_real("model.beta_occ", c.beta_occ);
        c.beta = get_real("model.beta", c.beta);
        c.z_dim = get_int("model.z_dim", c.z_dim);
        c.validate();
        return c;
    }

    uint64_t model_seed() const { return get_seed("model.seed", 1); }

    train::TrainConfig trainer() const {
        train::TrainConfig c;
        c.epochs = get_int("train.epochs", c.epochs);
        c.batch_size = get_int("train.batch_size", c.batch_size);
        c.lr = get_real("train.lr", c.lr);
        c.beta1 = get_real("train.beta1", c.beta1);
        c.beta2 = get_real("train.beta2", c.beta2);
        c.eps = get_real("train.eps", c.eps);
        c.schedule.tau0 = get_real("train.tau0", c.schedule.tau0);
        c.schedule.rate = get_real("train.tau_rate", c.schedule.rate);
        c.schedule.tau_min = get_real("train.tau_min", c.schedule.tau_min);
        c.loss = losses::loss_variant_from_string(get_str("train.loss", "plain"));
        c.seed = get_seed("train.seed", 1);
        c.checkpoint_every = get_int("train.checkpoint_every", 0);
        c.validate();
        return c;
    }

    probe::ProbeConfig prober() const {
        probe::ProbeConfig c;
        c.freeze = probe::freeze_from_string(get_str("probe.freeze", "conv1_5"));
        c.hidden = get_int("probe.hidden", c.hidden);
        c.num_classes = get_int("probe.num_classes", 0);
        c.lr = get_real("probe.lr", c.lr);
        c.momentum = get_real("probe.momentum", c.momentum);
        c.decay_every = get_int("probe.decay_every", c.decay_every);
        c.decay_factor = get_real("probe.decay_factor", c.decay_factor);
        c.epochs = get_int("probe.epochs", c.epochs);
        c.batch_size = get_int("probe.batch_size", c.batch_size);
        c.seed = get_seed("probe.seed", 1);
        return c;
    }

    data::SynthSpec synth() const {
        data::SynthSpec s;
        s.canvas = get_int("synth.canvas", s.canvas);
        s.motif_count = get_int("synth.motif_count", s.motif_count);
        s.motif_size = get_int("synth.motif_size", s.motif_size);
        s.motifs_per_image = get_int("synth.motifs_per_image", s.motifs_per_image);
        s.noise_level = static_cast<float>(get_real("synth.noise_level", s.noise_level));
        s.count = get_int("synth.count", s.count);
        s.seed = get_seed("synth.seed", s.seed);
        s.validate();
        return s;
    }

    // Loads the dataset named by data.* keys.
    data::Dataset dataset() const {
        std::string kind = get_str("data.kind", "");
        PVAE_CHECK(!kind.empty(), "config needs data.kind (cifar | folder | container | synth)");
        data::Split split =
            get_str("data.split", "train") == "test" ? data::Split::test : data::Split::train;
        data::Dataset ds;
        if (kind == "cifar") {
            ds = data::load_cifar_binary(get_str("data.path", ""), split);
        } else if (kind == "folder") {
            ds = data::load_image_folder(get_str("data.path", ""), get_int("data.size", 64), split);
        } else if (kind == "container") {
            ds = data::load_dataset(get_str("data.path", ""));
        } else if (kind == "synth") {
            ds = data::make_synthetic(synth()).data;
        } else {
            throw Error("unknown data.kind '" + kind + "'");
        }
        int limit = get_int("data.limit", 0);
        if (limit > 0) ds = ds.limit_per_class(limit);
        return ds;
    }

    const std::map<std::string, std::string>& entries() const { return kv_; }

    // Resolved snapshot of every provided key, written next to run outputs.
    void write_snapshot(const std::filesystem::path& path) const {
        std::ofstream f(path);
        PVAE_CHECK(f.good(), "cannot write snapshot '" << path.string() << "'");
        for (auto& [k, v] : kv_) f << k << " = " << v << "\n";
    }

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace pvae::config

#endif
