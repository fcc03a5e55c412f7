#include "bitseg/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace bitseg;

namespace {

// Flags shared by every verb. Precedence: built-in defaults < config file
// (or the checkpoint's embedded config) < --set overrides < dedicated flags.
struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::optional<int> threads;
    std::optional<std::string> precision;

    void add(CLI::App* app)
    {
        app->add_option("-c,--config", config, "JSON run config");
        app->add_option("--set", overrides, "Override a config key: section.key=value (repeatable)");
        app->add_option("--threads", threads, "Worker threads (0 = all cores)");
        app->add_option("--precision", precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    }

    RunConfig load(const std::optional<fs::path>& fallback = std::nullopt) const
    {
        RunConfig cfg;
        if (!config.empty())
            cfg = load_run_config(config);
        else if (fallback && fs::exists(*fallback))
            cfg = load_run_config(*fallback);
        cfg = with_overrides(cfg, overrides);
        if (threads)
            cfg.threads = *threads;
        if (precision)
            cfg.precision = parse_precision(*precision);
        return cfg;
    }
};

// Training hyper-parameters exposed as flags (train and ablate).
struct TrainFlags {
    std::optional<int> steps, batch, seed, checkpoint_every;
    std::optional<double> lr, input_scale, loss_power, ema_decay;
    std::optional<std::string> loss;

    void add(CLI::App* app)
    {
        app->add_option("--steps", steps, "Training steps");
        app->add_option("--batch", batch, "Batch size");
        app->add_option("--lr", lr, "Adam learning rate");
        app->add_option("--loss", loss, "ce or l2")->check(CLI::IsMember({"ce", "l2"}));
        app->add_option("--input-scale", input_scale, "Analog bit scale b");
        app->add_option("--loss-power", loss_power, "Loss weight exponent p");
        app->add_option("--ema-decay", ema_decay, "EMA decay");
        app->add_option("--seed", seed, "Training seed");
        app->add_option("--checkpoint-every", checkpoint_every, "Checkpoint interval in steps (0 = final only)");
    }

    void apply(RunConfig& c) const
    {
        if (steps) c.train.steps = *steps;
        if (batch) c.train.batch_size = *batch;
        if (lr) c.train.adam.lr = *lr;
        if (loss) c.train.loss = parse_loss(*loss);
        if (input_scale) c.net.codec.scale = *input_scale;
        if (loss_power) c.train.loss_power = *loss_power;
        if (ema_decay) c.train.ema_decay = *ema_decay;
        if (seed) c.train.seed = static_cast<std::uint64_t>(*seed);
        if (checkpoint_every) c.train.checkpoint_every = *checkpoint_every;
    }
};

struct SampleFlags {
    std::optional<int> steps, seed, min_pixels, steps_first, steps_rest;
    std::optional<double> td;
    bool raw_weights = false;

    void add(CLI::App* app)
    {
        app->add_option("--sample-steps", steps, "Sampling steps (images)");
        app->add_option("--td", td, "Asymmetric time offset");
        app->add_option("--sample-seed", seed, "Sampling seed");
        app->add_option("--min-pixels", min_pixels, "Drop instances smaller than this");
        app->add_option("--steps-first", steps_first, "Video: steps for the first frame");
        app->add_option("--steps-rest", steps_rest, "Video: steps for later frames");
        app->add_flag("--raw-weights", raw_weights, "Sample with raw instead of EMA weights");
    }

    void apply(RunConfig& c) const
    {
        if (steps) c.sample.sampler.steps = *steps;
        if (td) c.sample.sampler.td = *td;
        if (seed) c.sample.sampler.seed = static_cast<std::uint64_t>(*seed);
        if (min_pixels) c.sample.min_pixels = *min_pixels;
        if (steps_first) c.sample.steps_first = *steps_first;
        if (steps_rest) c.sample.steps_rest = *steps_rest;
        if (raw_weights) c.sample.use_ema = false;
    }
};

std::vector<int> parse_steps(const std::string& s)
{
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty())
            out.push_back(std::stoi(tok));
    return out;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Panoptic segmentation by diffusion over analog bits, on synthetic scenes"};
    app.require_subcommand(1);

    // gendata
    Common g_common;
    GendataOptions g;
    std::string g_split = "train";
    std::optional<int> g_scene_seed;
    auto* gen = app.add_subcommand("gendata", "Generate a synthetic dataset");
    g_common.add(gen);
    gen->add_option("-o,--out", g.out, "Output directory")->required();
    gen->add_option("--split", g_split, "train or val")->check(CLI::IsMember({"train", "val"}));
    gen->add_option("--size", g.size, "Number of samples (default from config data section)");
    gen->add_flag("--video", g.video, "Generate videos instead of images");
    gen->add_flag("--png", g.png, "Also write PNG previews");
    gen->add_option("--scene-seed", g_scene_seed, "Scene generator seed");

    // train
    Common t_common;
    TrainFlags t_flags;
    TrainOptions t;
    std::string t_resume, t_init;
    auto* train = app.add_subcommand("train", "Train a model (image, or video fine-tuning with --init-from)");
    t_common.add(train);
    t_flags.add(train);
    train->add_option("-d,--data", t.data, "Training dataset directory")->required();
    train->add_option("-o,--out", t.out, "Run directory (checkpoints, log.csv, config.json)")->required();
    train->add_option("--resume", t_resume, "Checkpoint to continue from");
    train->add_option("--init-from", t_init, "Image-model checkpoint to fine-tune for video");
    train->add_option("--past-frames", t.past_frames, "Past masks used as conditioning with --init-from")->check(CLI::Range(1, 2));
    train->add_flag("-q,--quiet", t.quiet, "No progress output");

    // sample
    Common s_common;
    SampleFlags s_flags;
    SampleCmdOptions s;
    std::string s_dump;
    bool s_no_png = false;
    auto* samp = app.add_subcommand("sample", "Sample masks for a dataset with a trained checkpoint");
    s_common.add(samp);
    s_flags.add(samp);
    samp->add_option("-k,--checkpoint", s.checkpoint, "Checkpoint")->required();
    samp->add_option("-d,--data", s.data, "Dataset directory with images")->required();
    samp->add_option("-o,--out", s.out, "Output directory")->required();
    samp->add_option("--steps", s_flags.steps, "Sampling steps (images)");
    samp->add_option("--seed", s_flags.seed, "Sampling seed");
    samp->add_option("--dump-trajectory", s_dump, "Comma-separated steps whose clean-mask estimate is written");
    samp->add_flag("--no-png", s_no_png, "Skip PNG overlays");
    samp->add_option("--limit", s.limit, "Only the first N images or videos");

    // eval
    Common e_common;
    EvalOptions e;
    std::string e_mode = "pq", e_out;
    std::optional<int> e_radius;
    auto* ev = app.add_subcommand("eval", "Score predicted masks against ground truth");
    e_common.add(ev);
    ev->add_option("-p,--pred", e.pred, "Prediction directory")->required();
    ev->add_option("-g,--gt", e.gt, "Ground-truth dataset directory")->required();
    ev->add_option("-m,--mode", e_mode, "pq, jf or track")->check(CLI::IsMember({"pq", "jf", "track"}));
    ev->add_option("-o,--out", e_out, "Write report.csv and report.txt here");
    ev->add_option("--boundary-radius", e_radius, "Boundary tolerance in pixels (default from image diagonal)");

    // ablate
    Common a_common;
    TrainFlags a_flags;
    SampleFlags a_sflags;
    AblateOptions a;
    std::string a_base, a_values;
    auto* abl = app.add_subcommand("ablate", "Sweep one training or inference setting and tabulate PQ");
    a_common.add(abl);
    a_flags.add(abl);
    a_sflags.add(abl);
    abl->add_option("--grid", a.grid, "b, loss, p, steps, td or min_pixels")
        ->required()
        ->check(CLI::IsMember({"b", "loss", "p", "steps", "td", "min_pixels"}));
    abl->add_option("--values", a_values, "Comma-separated grid values (default: the standard grid)");
    abl->add_option("--train-data", a.train_data, "Training dataset directory");
    abl->add_option("--val-data", a.val_data, "Validation dataset directory")->required();
    abl->add_option("-o,--out", a.out, "Output directory")->required();
    abl->add_option("--base-checkpoint", a_base, "Model for inference grids (trained when absent)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            auto cfg = g_common.load();
            g.split = parse_split(g_split);
            if (g_scene_seed)
                cfg.scene.seed = static_cast<std::uint64_t>(*g_scene_seed);
            cmd_gendata(cfg, g, std::cout);
        } else if (train->parsed()) {
            if (!t_resume.empty())
                t.resume = t_resume;
            if (!t_init.empty())
                t.init_from = t_init;
            RunConfig cfg;
            if (t.resume && t_common.config.empty())
                cfg = with_overrides(load_checkpoint_config(*t.resume), t_common.overrides);
            else
                cfg = t_common.load();
            if (t_common.threads)
                cfg.threads = *t_common.threads;
            if (t_common.precision)
                cfg.precision = parse_precision(*t_common.precision);
            t_flags.apply(cfg);
            const auto r = cmd_train(cfg, t, std::cout);
            std::cout << "final loss " << r.final_loss << " after " << r.steps << " steps; checkpoint " << r.checkpoint.string() << "\n";
        } else if (samp->parsed()) {
            RunConfig cfg = s_common.config.empty() ? with_overrides(load_checkpoint_config(s.checkpoint), s_common.overrides)
                                                    : s_common.load();
            if (s_common.threads)
                cfg.threads = *s_common.threads;
            s_flags.apply(cfg);
            s.dump_steps = parse_steps(s_dump);
            s.png = !s_no_png;
            cmd_sample(cfg, s, std::cout);
        } else if (ev->parsed()) {
            auto cfg = e_common.load(e.gt / "config.json");
            if (e_radius)
                cfg.metrics.boundary_radius = *e_radius;
            e.mode = parse_eval_mode(e_mode);
            if (!e_out.empty())
                e.out = e_out;
            cmd_eval(cfg, e, std::cout);
        } else if (abl->parsed()) {
            auto cfg = a_common.load();
            a_flags.apply(cfg);
            a_sflags.apply(cfg);
            if (!a_values.empty()) {
                std::stringstream ss(a_values);
                std::string tok;
                while (std::getline(ss, tok, ','))
                    a.values.push_back(tok);
            }
            if (!a_base.empty())
                a.base_checkpoint = a_base;
            if (is_training_grid(a.grid) || !a.base_checkpoint) {
                if (a.train_data.empty())
                    throw std::invalid_argument("ablate: --train-data is required to train models for this grid");
            }
            cmd_ablate(cfg, a, std::cout);
        }
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
    return 0;
}
