#include "bitseg/commands.hpp"

#include "bitseg/parallel.hpp"
#include "bitseg/random.hpp"
#include "bitseg/scenes.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace bitseg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <typename F>
auto with_precision(Precision p, F&& f)
{
    if (p == Precision::f32)
        return f.template operator()<float>();
    return f.template operator()<double>();
}

void apply_threads(const RunConfig& cfg)
{
    if (cfg.threads > 0)
        set_num_threads(static_cast<std::size_t>(cfg.threads));
}

fs::path stem_of(const std::string& rel)
{
    fs::path p(rel);
    return p.parent_path() / p.stem();
}

void ensure_dir(const fs::path& dir)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir))
        throw std::runtime_error("cannot create directory " + dir.string() + (ec ? ": " + ec.message() : ""));
}

std::string fmt(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

Dataset load_dataset(const fs::path& dir)
{
    const auto manifest = read_manifest(dir);
    if (manifest.empty())
        throw std::runtime_error("dataset " + dir.string() + " is empty");
    std::map<std::uint64_t, std::vector<ManifestEntry>> groups;
    for (const auto& e : manifest)
        groups[e.index].push_back(e);
    Dataset ds;
    for (auto& [index, entries] : groups) {
        std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.frame < b.frame; });
        for (std::size_t f = 0; f < entries.size(); ++f)
            if (entries[f].frame != static_cast<int>(f))
                throw std::runtime_error("dataset " + dir.string() + ": index " + std::to_string(index) + " is missing frame " +
                                         std::to_string(f));
        ds.indices.push_back(index);
        ds.entries.push_back(std::move(entries));
    }
    ds.sequences.resize(ds.entries.size());
    parallel_for(ds.entries.size(), [&](std::size_t s) {
        for (const auto& e : ds.entries[s]) {
            Frame fr{read_ppm(dir / e.image), load_mask(dir / e.mask)};
            if (fr.image.height != fr.mask.height || fr.image.width != fr.mask.width)
                throw std::runtime_error("dataset " + dir.string() + ": image and mask sizes differ for " + e.mask);
            ds.sequences[s].push_back(std::move(fr));
        }
    });
    return ds;
}

template <typename T>
ParamStore<T> sampling_params(const TrainState<T>& state, bool use_ema)
{
    if (!use_ema)
        return state.params;
    ParamStore<T> out;
    for (std::size_t k = 0; k < state.params.size(); ++k)
        out.add(state.params.names()[k], state.ema[k]);
    return out;
}

template <typename T>
Segmentation segment_image(const BoundNet<T>& net, const Image& image, const SamplerConfig& sampler, int min_pixels,
                           std::span<const PanopticMask> past, std::span<const int> record_steps)
{
    const NetConfig& cfg = net.config();
    Tensor<T> h;
    Tensor<T> past_bits;
    {
        NoGradGuard ng;
        const Image* ptr = &image;
        h = encode_image(net, Var<T>(image_tensor<T>(std::span<const Image* const>(&ptr, 1)))).value();
        if (cfg.past_frames > 0) {
            const auto p = encode_past<T>(past, cfg, image.height, image.width);
            past_bits = p.reshaped({1, p.dim(0), p.dim(1), p.dim(2)});
        } else if (!past.empty()) {
            throw std::invalid_argument("segment_image: past masks given to a net without past frames");
        }
    }
    const auto fn = make_denoise_fn(net, h, past_bits);
    const Shape bits{static_cast<std::size_t>(cfg.bit_channels()), static_cast<std::size_t>(image.height),
                     static_cast<std::size_t>(image.width)};
    auto r = sample<T>(fn, bits, sampler, cfg.codec, cfg.num_classes, cfg.max_instances, {}, record_steps);
    Segmentation out;
    out.mask = filter_small_instances(r.mask, min_pixels);
    for (const auto& [step, est] : r.trajectory)
        out.trajectory.emplace_back(step, decode_analog(est, cfg.codec, cfg.num_classes, cfg.max_instances));
    return out;
}

template <typename T>
std::vector<Segmentation> segment_sequence(const BoundNet<T>& net, const Sequence& seq, std::uint64_t index, const SampleOptions& opt,
                                           std::span<const int> record_steps)
{
    const int P = net.config().past_frames;
    std::vector<Segmentation> out;
    for (std::size_t f = 0; f < seq.size(); ++f) {
        SamplerConfig s = opt.sampler;
        s.seed = derive_seed(opt.sampler.seed, {index, static_cast<std::uint64_t>(f)});
        std::vector<PanopticMask> past;
        if (P > 0) {
            s.steps = f == 0 ? opt.steps_first : opt.steps_rest;
            for (std::size_t k = 1; k <= static_cast<std::size_t>(P) && k <= f; ++k)
                past.push_back(out[f - k].mask);
        }
        out.push_back(segment_image(net, seq[f].image, s, opt.min_pixels, past, record_steps));
    }
    return out;
}

template <typename T>
std::vector<std::vector<PanopticMask>> predict(const NetConfig& net, const ParamStore<T>& params, std::span<const Sequence> data,
                                               std::span<const std::uint64_t> indices, const SampleOptions& opt)
{
    if (indices.size() != data.size())
        throw std::invalid_argument("predict: one index per sequence required");
    const BoundNet<T> bound(net, params, false);
    std::vector<std::vector<PanopticMask>> out(data.size());
    parallel_for(data.size(), [&](std::size_t s) {
        for (auto& seg : segment_sequence(bound, data[s], indices[s], opt))
            out[s].push_back(std::move(seg.mask));
    });
    return out;
}

std::vector<PanopticMask> flatten(const std::vector<std::vector<PanopticMask>>& seqs)
{
    std::vector<PanopticMask> out;
    for (const auto& s : seqs)
        out.insert(out.end(), s.begin(), s.end());
    return out;
}

std::vector<PanopticMask> gt_masks(std::span<const Sequence> data)
{
    std::vector<PanopticMask> out;
    for (const auto& s : data)
        for (const auto& f : s)
            out.push_back(f.mask);
    return out;
}

// ---------------------------------------------------------------- gendata

void cmd_gendata(const RunConfig& cfg, const GendataOptions& opt, std::ostream& log)
{
    validate(cfg);
    apply_threads(cfg);
    const std::size_t size = opt.size.value_or(opt.split == Split::train ? cfg.data.train_size : cfg.data.val_size);
    const auto t0 = Clock::now();
    write_dataset(cfg.scene, opt.video ? std::optional<VideoConfig>(cfg.video) : std::nullopt, opt.split, size, opt.out, opt.png);
    save_run_config(cfg, opt.out / "config.json");
    log << "wrote " << size << (opt.video ? " videos" : " images") << " (" << split_name(opt.split) << ") to " << opt.out.string()
        << " in " << format_metric(seconds_since(t0), 1) << " s\n";
}

// ---------------------------------------------------------------- train

std::vector<std::pair<std::int64_t, double>> read_loss_log(const fs::path& csv)
{
    std::ifstream f(csv);
    if (!f)
        throw std::runtime_error("cannot open log " + csv.string());
    std::string line;
    std::getline(f, line);
    if (line.rfind("step,loss", 0) != 0)
        throw std::runtime_error(csv.string() + ": not a training log");
    std::vector<std::pair<std::int64_t, double>> rows;
    while (std::getline(f, line)) {
        if (line.empty())
            continue;
        std::istringstream ss(line);
        std::string step, loss;
        std::getline(ss, step, ',');
        std::getline(ss, loss, ',');
        rows.emplace_back(std::stoll(step), std::stod(loss));
    }
    return rows;
}

namespace {

void check_resume(const NetConfig& want_net, const TrainConfig& want, const NetConfig& have_net, const TrainConfig& have)
{
    NetConfig a = want_net, b = have_net;
    a.past_frames = b.past_frames;
    if (!(a == b))
        throw std::runtime_error("resume mismatch: the net config differs from the checkpoint's");
    TrainConfig x = want, y = have;
    x.steps = y.steps;
    x.checkpoint_every = y.checkpoint_every;
    x.log_every = y.log_every;
    if (!(x == y))
        throw std::runtime_error("resume mismatch: the train config differs from the checkpoint's (only steps, checkpoint_every and "
                                 "log_every may change)");
}

template <typename T>
TrainSummary train_impl(const RunConfig& cfg, const TrainOptions& opt, std::ostream& log)
{
    TrainState<T> state;
    if (opt.resume) {
        auto ck = load_checkpoint<T>(*opt.resume);
        check_resume(cfg.net, cfg.train, ck.state.net, ck.state.train);
        state = std::move(ck.state);
        state.train.steps = cfg.train.steps;
        state.train.checkpoint_every = cfg.train.checkpoint_every;
        state.train.log_every = cfg.train.log_every;
    } else if (opt.init_from) {
        auto ck = load_checkpoint<T>(*opt.init_from);
        if (ck.state.net.past_frames != 0)
            throw std::runtime_error("init_from expects an image-model checkpoint, got one with past frames");
        state = video_finetune_state(ck.state, cfg.train, opt.past_frames);
    } else {
        state = init_train_state<T>(cfg.net, cfg.train);
    }

    const Dataset data = load_dataset(opt.data);
    const auto& probe = data.sequences.front().front().mask;
    if (probe.num_classes != state.net.num_classes || probe.max_instances != state.net.max_instances)
        throw std::runtime_error("dataset C/K (" + std::to_string(probe.num_classes) + ", " + std::to_string(probe.max_instances) +
                                 ") do not match the net (" + std::to_string(state.net.num_classes) + ", " +
                                 std::to_string(state.net.max_instances) + ")");

    ensure_dir(opt.out);
    RunConfig effective = cfg;
    effective.net = state.net;
    effective.train = state.train;
    save_run_config(effective, opt.out / "config.json");

    // keep the log rows up to the resumed step so the curve stays continuous
    const fs::path log_path = opt.out / "log.csv";
    std::vector<std::string> kept;
    if (opt.resume && fs::exists(log_path)) {
        std::ifstream in(log_path);
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line))
            if (!line.empty() && std::stoll(line.substr(0, line.find(','))) <= state.step)
                kept.push_back(line);
    }
    std::ofstream csv(log_path, std::ios::trunc);
    if (!csv)
        throw std::runtime_error("cannot write " + log_path.string());
    csv << "step,loss,lr,wall_ms\n";
    for (const auto& l : kept)
        csv << l << "\n";
    csv.flush();

    const auto t0 = Clock::now();
    const std::int64_t total = state.train.steps;
    const std::int64_t report_every = std::max<std::int64_t>(1, total / 20);
    double loss = 0;
    auto save = [&](const fs::path& p) { save_checkpoint(p, state, effective); };
    while (state.step < total) {
        const double lr = scheduled_lr(state.train, state.step);
        loss = train_step(state, data.sequences);
        if (state.step % state.train.log_every == 0) {
            csv << state.step << "," << fmt(loss) << "," << fmt(lr) << ","
                << static_cast<std::int64_t>(seconds_since(t0) * 1000) << "\n";
            csv.flush();
        }
        if (state.train.checkpoint_every > 0 && state.step % state.train.checkpoint_every == 0) {
            char name[32];
            std::snprintf(name, sizeof name, "ckpt_%06lld.bpck", static_cast<long long>(state.step));
            save(opt.out / name);
        }
        if (!opt.quiet && (state.step % report_every == 0 || state.step == total)) {
            char line[96];
            std::snprintf(line, sizeof line, "step %lld/%lld  loss %.4f  %.0f s\n", static_cast<long long>(state.step),
                          static_cast<long long>(total), loss, seconds_since(t0));
            log << line << std::flush;
        }
    }
    const fs::path final_path = opt.out / "final.bpck";
    save(final_path);
    return {final_path, state.step, loss, seconds_since(t0)};
}

} // namespace

TrainSummary cmd_train(const RunConfig& cfg, const TrainOptions& opt, std::ostream& log)
{
    validate(cfg);
    apply_threads(cfg);
    if (opt.resume && opt.init_from)
        throw std::invalid_argument("train: --resume and --init-from are exclusive");
    Precision p = cfg.precision;
    if (opt.resume)
        p = checkpoint_precision(*opt.resume);
    return with_precision(p, [&]<typename T>() { return train_impl<T>(cfg, opt, log); });
}

// ---------------------------------------------------------------- sample

namespace {

template <typename T>
void sample_impl(const RunConfig& cfg, const SampleCmdOptions& opt, std::ostream& log)
{
    auto ck = load_checkpoint<T>(opt.checkpoint);
    const NetConfig net = ck.state.net;
    const BoundNet<T> bound(net, sampling_params(ck.state, cfg.sample.use_ema), false);
    Dataset data = load_dataset(opt.data);
    if (opt.limit && *opt.limit < data.sequences.size()) {
        data.sequences.resize(*opt.limit);
        data.indices.resize(*opt.limit);
        data.entries.resize(*opt.limit);
    }
    ensure_dir(opt.out);
    RunConfig effective = cfg;
    effective.net = net;
    effective.train = ck.state.train;
    save_run_config(effective, opt.out / "config.json");

    const auto t0 = Clock::now();
    std::vector<std::vector<Segmentation>> results(data.sequences.size());
    parallel_for(data.sequences.size(), [&](std::size_t s) {
        results[s] = segment_sequence(bound, data.sequences[s], data.indices[s], cfg.sample, opt.dump_steps);
    });

    std::vector<ManifestEntry> manifest;
    for (std::size_t s = 0; s < results.size(); ++s)
        for (std::size_t f = 0; f < results[s].size(); ++f) {
            const auto& e = data.entries[s][f];
            const auto& seg = results[s][f];
            const fs::path mask_path = opt.out / e.mask;
            ensure_dir(mask_path.parent_path());
            save_mask(seg.mask, mask_path);
            const fs::path stem = stem_of(e.mask);
            if (opt.png)
                write_png(overlay(data.sequences[s][f].image, seg.mask), opt.out / (stem.string() + "_overlay.png"));
            for (const auto& [step, m] : seg.trajectory) {
                char suffix[32];
                std::snprintf(suffix, sizeof suffix, "_step%02d", step);
                const fs::path base = opt.out / "trajectory" / (stem.string() + suffix);
                ensure_dir(base.parent_path());
                save_mask(m, base.string() + ".panm");
                write_png(colorize(m), base.string() + ".png");
            }
            manifest.push_back({e.index, e.frame, fs::absolute(opt.data / e.image).string(), e.mask});
        }
    write_manifest(manifest, opt.out);
    log << "sampled " << manifest.size() << " masks (" << (net.past_frames ? "streaming video" : "per image") << ", "
        << (cfg.sample.use_ema ? "EMA" : "raw") << " weights) into " << opt.out.string() << " in " << format_metric(seconds_since(t0), 1)
        << " s\n";
}

} // namespace

void cmd_sample(const RunConfig& cfg, const SampleCmdOptions& opt, std::ostream& log)
{
    validate(cfg.sample.sampler);
    apply_threads(cfg);
    with_precision(checkpoint_precision(opt.checkpoint), [&]<typename T>() { sample_impl<T>(cfg, opt, log); });
}

// ---------------------------------------------------------------- eval

EvalMode parse_eval_mode(const std::string& s)
{
    if (s == "pq")
        return EvalMode::pq;
    if (s == "jf")
        return EvalMode::jf;
    if (s == "track")
        return EvalMode::track;
    throw std::invalid_argument("unknown eval mode '" + s + "' (expected pq, jf or track)");
}

Report pq_report(const PQResult& r, const SceneConfig& scene)
{
    Report rep{{"scope", "PQ", "PQ_thing", "PQ_stuff", "TP", "FP", "FN"}, {}};
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (const auto& c : r.per_class) {
        tp += c.tp;
        fp += c.fp;
        fn += c.fn;
    }
    rep.rows.push_back({"all", format_metric(r.pq), format_metric(r.pq_thing), format_metric(r.pq_stuff), std::to_string(tp),
                        std::to_string(fp), std::to_string(fn)});
    for (std::size_t c = 1; c < r.per_class.size(); ++c) {
        const auto& s = r.per_class[c];
        const std::string name = c < scene.classes.size() ? scene.classes[c].name : "class" + std::to_string(c);
        const std::string v = s.defined() ? format_metric(s.pq()) : "-";
        const bool thing = c < scene.classes.size() && scene.classes[c].thing;
        rep.rows.push_back({name, v, thing ? v : "-", thing ? "-" : v, std::to_string(s.tp), std::to_string(s.fp), std::to_string(s.fn)});
    }
    return rep;
}

Report video_report(std::span<const std::vector<PanopticMask>> preds, std::span<const std::vector<PanopticMask>> gts, int radius,
                    bool with_track)
{
    if (preds.size() != gts.size() || preds.empty())
        throw std::invalid_argument("video_report: need the same nonzero number of predicted and gt videos");
    double jm = 0, jr = 0, fm = 0, fr = 0;
    std::int64_t objects = 0;
    TrackCount track;
    for (std::size_t v = 0; v < preds.size(); ++v) {
        const auto r = jaccard_and_f(preds[v], gts[v], radius);
        jm += r.j_mean;
        jr += r.j_recall;
        fm += r.f_mean;
        fr += r.f_recall;
        objects += r.objects;
        if (with_track) {
            const auto t = track_consistency(preds[v], gts[v]);
            track.consistent += t.consistent;
            track.transitions += t.transitions;
        }
    }
    const double n = static_cast<double>(preds.size());
    Report rep{{"videos", "objects", "J&F", "J_mean", "J_recall", "F_mean", "F_recall"}, {}};
    std::vector<std::string> row{std::to_string(preds.size()), std::to_string(objects), format_metric((jm + fm) / (2 * n)),
                                 format_metric(jm / n),         format_metric(jr / n),   format_metric(fm / n),
                                 format_metric(fr / n)};
    if (with_track) {
        rep.columns.insert(rep.columns.end(), {"track", "transitions"});
        row.push_back(format_metric(track.fraction()));
        row.push_back(std::to_string(track.transitions));
    }
    rep.rows.push_back(std::move(row));
    return rep;
}

Report cmd_eval(const RunConfig& cfg, const EvalOptions& opt, std::ostream& log)
{
    apply_threads(cfg);
    const auto gt_entries = read_manifest(opt.gt);
    if (gt_entries.empty())
        throw std::runtime_error("eval: gt manifest in " + opt.gt.string() + " is empty");
    std::map<std::uint64_t, std::vector<std::pair<int, std::size_t>>> groups;
    for (std::size_t i = 0; i < gt_entries.size(); ++i) {
        const fs::path p = opt.pred / gt_entries[i].mask;
        if (!fs::exists(p))
            throw std::runtime_error("eval: missing prediction " + p.string() + " for gt " + gt_entries[i].mask);
        groups[gt_entries[i].index].emplace_back(gt_entries[i].frame, i);
    }
    std::vector<PanopticMask> preds(gt_entries.size()), gts(gt_entries.size());
    parallel_for(gt_entries.size(), [&](std::size_t i) {
        gts[i] = load_mask(opt.gt / gt_entries[i].mask);
        preds[i] = load_mask(opt.pred / gt_entries[i].mask);
    });
    for (std::size_t i = 0; i < gts.size(); ++i)
        if (preds[i].height != gts[i].height || preds[i].width != gts[i].width)
            throw std::runtime_error("eval: size mismatch for " + gt_entries[i].mask);

    Report rep;
    if (opt.mode == EvalMode::pq) {
        if (gts.front().num_classes != cfg.scene.num_classes())
            throw std::runtime_error("eval: gt masks have " + std::to_string(gts.front().num_classes) + " classes but the config has " +
                                     std::to_string(cfg.scene.num_classes()));
        rep = pq_report(panoptic_quality(preds, gts, cfg.scene.thing_flags()), cfg.scene);
    } else {
        std::vector<std::vector<PanopticMask>> pv, gv;
        for (auto& [index, frames] : groups) {
            std::sort(frames.begin(), frames.end());
            pv.emplace_back();
            gv.emplace_back();
            for (auto [f, i] : frames) {
                pv.back().push_back(preds[i]);
                gv.back().push_back(gts[i]);
            }
        }
        const int radius = cfg.metrics.boundary_radius >= 0 ? cfg.metrics.boundary_radius
                                                            : default_boundary_radius(gts.front().height, gts.front().width);
        rep = video_report(pv, gv, radius, opt.mode == EvalMode::track);
    }
    if (opt.out) {
        ensure_dir(*opt.out);
        std::ofstream(*opt.out / "report.csv") << rep.to_csv();
        std::ofstream(*opt.out / "report.txt") << rep.to_table();
        save_run_config(cfg, *opt.out / "config.json");
    }
    log << rep.to_table();
    return rep;
}

// ---------------------------------------------------------------- ablate

std::vector<std::string> default_grid(const std::string& grid)
{
    if (grid == "b")
        return {"0.03", "0.1", "0.3", "1.0"};
    if (grid == "loss")
        return {"ce", "l2"};
    if (grid == "p")
        return {"0", "0.2", "0.4", "0.6"};
    if (grid == "steps")
        return {"5", "10", "20", "50"};
    if (grid == "td")
        return {"0", "1", "2", "3", "4"};
    if (grid == "min_pixels")
        return {"0", "5", "10", "20", "40"};
    throw std::invalid_argument("unknown ablation grid '" + grid + "' (expected b, loss, p, steps, td or min_pixels)");
}

bool is_training_grid(const std::string& grid)
{
    default_grid(grid);
    return grid == "b" || grid == "loss" || grid == "p";
}

std::string describe_trend(const std::vector<std::string>& labels, const std::vector<double>& values)
{
    if (values.size() < 2)
        return "trend: single cell";
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const std::size_t best = static_cast<std::size_t>(hi - values.begin());
    if (*hi - *lo < 0.01)
        return "trend: flat (PQ range " + format_metric(*hi - *lo) + ")";
    bool up = true, down = true;
    for (std::size_t i = 1; i < values.size(); ++i) {
        up = up && values[i] >= values[i - 1];
        down = down && values[i] <= values[i - 1];
    }
    if (up)
        return "trend: PQ increases along the grid, best at " + labels[best];
    if (down)
        return "trend: PQ decreases along the grid, best at " + labels[best];
    bool unimodal = true;
    for (std::size_t i = 1; i < values.size(); ++i)
        unimodal = unimodal && (i <= best ? values[i] >= values[i - 1] : values[i] <= values[i - 1]);
    if (unimodal)
        return "trend: PQ peaks at " + labels[best];
    return "trend: non-monotonic, best at " + labels[best];
}

namespace {

void apply_cell(RunConfig& c, const std::string& grid, const std::string& v)
{
    try {
        if (grid == "b")
            c.net.codec.scale = std::stod(v);
        else if (grid == "loss")
            c.train.loss = parse_loss(v);
        else if (grid == "p")
            c.train.loss_power = std::stod(v);
        else if (grid == "steps")
            c.sample.sampler.steps = std::stoi(v);
        else if (grid == "td")
            c.sample.sampler.td = std::stod(v);
        else if (grid == "min_pixels")
            c.sample.min_pixels = std::stoi(v);
    } catch (const std::logic_error& e) {
        throw std::invalid_argument("ablate: bad value '" + v + "' for grid " + grid);
    }
}

template <typename T>
AblateResult ablate_impl(const RunConfig& cfg, const AblateOptions& opt, std::ostream& log)
{
    const auto values = opt.values.empty() ? default_grid(opt.grid) : opt.values;
    const bool training = is_training_grid(opt.grid);
    const Dataset val = load_dataset(opt.val_data);
    const auto gts = gt_masks(val.sequences);
    const auto thing = cfg.scene.thing_flags();
    ensure_dir(opt.out);
    save_run_config(cfg, opt.out / "config.json");

    std::optional<Dataset> train;
    auto train_data = [&]() -> const Dataset& {
        if (!train)
            train = load_dataset(opt.train_data);
        return *train;
    };
    auto fit = [&](const RunConfig& c, const fs::path& ckpt) {
        auto state = init_train_state<T>(c.net, c.train);
        double loss = 0;
        const auto t0 = Clock::now();
        const int every = std::max(1, c.train.steps / 5);
        while (state.step < c.train.steps) {
            loss = train_step(state, train_data().sequences);
            if (state.step % every == 0) {
                char line[96];
                std::snprintf(line, sizeof line, "  step %lld/%d  loss %.4f  %.0f s\n", static_cast<long long>(state.step), c.train.steps,
                              loss, seconds_since(t0));
                log << line << std::flush;
            }
        }
        save_checkpoint(ckpt, state, c);
        return std::make_pair(std::move(state), loss);
    };

    std::optional<TrainState<T>> base;
    if (!training) {
        if (opt.base_checkpoint) {
            base = load_checkpoint<T>(*opt.base_checkpoint).state;
        } else {
            log << "training the base model for the " << opt.grid << " sweep\n";
            base = fit(cfg, opt.out / "base.bpck").first;
        }
    }

    AblateResult res;
    res.report.columns = {opt.grid, "PQ", "PQ_thing", "PQ_stuff", "final_loss", "seconds"};
    std::vector<double> pqs;
    for (const auto& v : values) {
        RunConfig c = cfg;
        apply_cell(c, opt.grid, v);
        validate(c);
        log << opt.grid << " = " << v << "\n" << std::flush;
        const auto t0 = Clock::now();
        double loss = std::nan("");
        std::optional<TrainState<T>> trained;
        if (training) {
            auto [s, l] = fit(c, opt.out / ("cell_" + opt.grid + "_" + v + ".bpck"));
            trained = std::move(s);
            loss = l;
        }
        const TrainState<T>& state = training ? *trained : *base;
        const auto preds = flatten(predict(state.net, sampling_params(state, c.sample.use_ema), val.sequences, val.indices, c.sample));
        const auto r = panoptic_quality(preds, gts, thing);
        pqs.push_back(r.pq);
        res.report.rows.push_back({v, format_metric(r.pq), format_metric(r.pq_thing), format_metric(r.pq_stuff),
                                   training ? format_metric(loss) : "-", format_metric(seconds_since(t0), 1)});
        log << "  PQ " << format_metric(r.pq) << "\n" << std::flush;
        std::ofstream(opt.out / ("ablate_" + opt.grid + ".csv")) << res.report.to_csv();
    }
    res.trend = describe_trend(values, pqs);
    std::ofstream(opt.out / ("ablate_" + opt.grid + ".txt")) << res.report.to_table() << res.trend << "\n";
    log << res.report.to_table() << res.trend << "\n";
    return res;
}

} // namespace

AblateResult cmd_ablate(const RunConfig& cfg, const AblateOptions& opt, std::ostream& log)
{
    validate(cfg);
    apply_threads(cfg);
    Precision p = cfg.precision;
    if (!is_training_grid(opt.grid) && opt.base_checkpoint)
        p = checkpoint_precision(*opt.base_checkpoint);
    return with_precision(p, [&]<typename T>() { return ablate_impl<T>(cfg, opt, log); });
}

#define BITSEG_INSTANTIATE(T)                                                                                                        \
    template ParamStore<T> sampling_params<T>(const TrainState<T>&, bool);                                                           \
    template Segmentation segment_image<T>(const BoundNet<T>&, const Image&, const SamplerConfig&, int, std::span<const PanopticMask>, \
                                           std::span<const int>);                                                                    \
    template std::vector<Segmentation> segment_sequence<T>(const BoundNet<T>&, const Sequence&, std::uint64_t, const SampleOptions&, \
                                                           std::span<const int>);                                                    \
    template std::vector<std::vector<PanopticMask>> predict<T>(const NetConfig&, const ParamStore<T>&, std::span<const Sequence>,    \
                                                               std::span<const std::uint64_t>, const SampleOptions&);

BITSEG_INSTANTIATE(float)
BITSEG_INSTANTIATE(double)

} // namespace bitseg
