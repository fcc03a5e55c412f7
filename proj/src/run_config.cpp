#include "bitseg/run_config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

namespace bitseg {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(LossKind k) { return k == LossKind::cross_entropy ? "ce" : "l2"; }

LossKind parse_loss(const std::string& s)
{
    if (s == "ce" || s == "cross_entropy")
        return LossKind::cross_entropy;
    if (s == "l2")
        return LossKind::l2;
    throw std::invalid_argument("unknown loss '" + s + "' (expected ce or l2)");
}

std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& s)
{
    if (s == "f32")
        return Precision::f32;
    if (s == "f64")
        return Precision::f64;
    throw std::invalid_argument("unknown precision '" + s + "' (expected f32 or f64)");
}

namespace {

std::string to_string(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }

Activation parse_activation(const std::string& s)
{
    if (s == "gelu")
        return Activation::gelu;
    if (s == "relu")
        return Activation::relu;
    throw std::invalid_argument("unknown activation '" + s + "' (expected gelu or relu)");
}

std::string to_string(LrSchedule s) { return s == LrSchedule::constant ? "constant" : "linear"; }

LrSchedule parse_schedule(const std::string& s)
{
    if (s == "constant")
        return LrSchedule::constant;
    if (s == "linear")
        return LrSchedule::linear;
    throw std::invalid_argument("unknown lr_schedule '" + s + "' (expected constant or linear)");
}

// Reads keys from one JSON object and rejects the ones nobody asked for.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object())
            throw std::invalid_argument("config: '" + path_ + "' must be an object");
    }

    template <typename V>
    void get(const char* key, V& out)
    {
        seen_.insert(key);
        if (!j_.contains(key))
            return;
        try {
            out = j_.at(key).get<V>();
        } catch (const json::exception& e) {
            throw std::invalid_argument("config: bad value for '" + path_ + "." + key + "': " + e.what());
        }
    }

    template <typename V, typename Parse>
    void get_enum(const char* key, V& out, Parse parse)
    {
        std::string s;
        bool present = j_.contains(key);
        get(key, s);
        if (present)
            out = parse(s);
    }

    const json* sub(const char* key)
    {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    std::string path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const
    {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k))
                throw std::invalid_argument("config: unknown key '" + (path_.empty() ? k : path_ + "." + k) + "'");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_scene(const json& j, SceneConfig& s)
{
    Section r(j, "scene");
    r.get("height", s.height);
    r.get("width", s.width);
    r.get("max_instances", s.max_instances);
    if (const json* cl = r.sub("classes")) {
        if (!cl->is_array())
            throw std::invalid_argument("config: 'scene.classes' must be an array");
        s.classes.clear();
        for (std::size_t i = 0; i < cl->size(); ++i) {
            Section c((*cl)[i], "scene.classes[" + std::to_string(i) + "]");
            ClassSpec spec;
            c.get("name", spec.name);
            c.get("thing", spec.thing);
            c.get("color", spec.color);
            c.finish();
            s.classes.push_back(spec);
        }
    }
    if (const json* sc = r.sub("shape_class")) {
        Section c(*sc, "scene.shape_class");
        c.get("rectangle", s.shape_class[0]);
        c.get("disk", s.shape_class[1]);
        c.get("triangle", s.shape_class[2]);
        c.finish();
    }
    r.get("min_shapes", s.min_shapes);
    r.get("max_shapes", s.max_shapes);
    r.get("min_size", s.min_size);
    r.get("max_size", s.max_size);
    r.get("max_stuff_regions", s.max_stuff_regions);
    r.get("min_visible", s.min_visible);
    r.get("color_jitter", s.color_jitter);
    r.get("pixel_noise", s.pixel_noise);
    r.get("seed", s.seed);
    r.finish();
}

ordered_json write_scene(const SceneConfig& s)
{
    ordered_json classes = ordered_json::array();
    for (const auto& c : s.classes)
        classes.push_back({{"name", c.name}, {"thing", c.thing}, {"color", c.color}});
    return {{"height", s.height},
            {"width", s.width},
            {"max_instances", s.max_instances},
            {"classes", classes},
            {"shape_class", {{"rectangle", s.shape_class[0]}, {"disk", s.shape_class[1]}, {"triangle", s.shape_class[2]}}},
            {"min_shapes", s.min_shapes},
            {"max_shapes", s.max_shapes},
            {"min_size", s.min_size},
            {"max_size", s.max_size},
            {"max_stuff_regions", s.max_stuff_regions},
            {"min_visible", s.min_visible},
            {"color_jitter", s.color_jitter},
            {"pixel_noise", s.pixel_noise},
            {"seed", s.seed}};
}

} // namespace

void resolve(RunConfig& cfg)
{
    cfg.net.num_classes = cfg.scene.num_classes();
    cfg.net.max_instances = cfg.scene.max_instances;
}

void validate(const RunConfig& cfg)
{
    validate(cfg.scene);
    validate(cfg.video);
    validate(cfg.net);
    validate(cfg.train);
    validate(cfg.sample.sampler);
    if (cfg.net.num_classes != cfg.scene.num_classes() || cfg.net.max_instances != cfg.scene.max_instances)
        throw std::invalid_argument("config: net C/K disagree with the scene (call resolve)");
    if (cfg.scene.height % cfg.net.spatial_multiple() || cfg.scene.width % cfg.net.spatial_multiple())
        throw std::invalid_argument("config: image size " + std::to_string(cfg.scene.height) + "x" + std::to_string(cfg.scene.width) +
                                    " must be a multiple of " + std::to_string(cfg.net.spatial_multiple()) + " for decoder depth " +
                                    std::to_string(cfg.net.depth));
    if (cfg.sample.min_pixels < 0 || cfg.sample.steps_first < 1 || cfg.sample.steps_rest < 1)
        throw std::invalid_argument("config: sample.min_pixels must be >= 0 and steps_first/steps_rest >= 1");
    if (cfg.metrics.boundary_radius < -1)
        throw std::invalid_argument("config: metrics.boundary_radius must be >= 0 or -1 for automatic");
    if (cfg.threads < 0)
        throw std::invalid_argument("config: threads must be >= 0");
}

ordered_json to_json(const RunConfig& c)
{
    ordered_json j;
    j["scene"] = write_scene(c.scene);
    j["video"] = {{"frames", c.video.frames}, {"max_speed", c.video.max_speed}, {"occlusion", c.video.occlusion}};
    j["data"] = {{"train_size", c.data.train_size}, {"val_size", c.data.val_size}};
    j["net"] = {{"encoder_width", c.net.encoder_width}, {"feature_dim", c.net.feature_dim},     {"base_width", c.net.base_width},
                {"depth", c.net.depth},                 {"time_embed_dim", c.net.time_embed_dim}, {"time_hidden", c.net.time_hidden},
                {"past_frames", c.net.past_frames},     {"activation", to_string(c.net.activation)}};
    j["train"] = {{"input_scale", c.net.codec.scale},
                  {"class_bits", c.net.codec.class_bits},
                  {"instance_bits", c.net.codec.instance_bits},
                  {"loss", to_string(c.train.loss)},
                  {"loss_power", c.train.loss_power},
                  {"lr", c.train.adam.lr},
                  {"beta1", c.train.adam.beta1},
                  {"beta2", c.train.adam.beta2},
                  {"adam_eps", c.train.adam.eps},
                  {"lr_schedule", to_string(c.train.lr_schedule)},
                  {"ema_decay", c.train.ema_decay},
                  {"batch_size", c.train.batch_size},
                  {"steps", c.train.steps},
                  {"seed", c.train.seed},
                  {"past_drop", c.train.past_drop},
                  {"checkpoint_every", c.train.checkpoint_every},
                  {"log_every", c.train.log_every}};
    j["sample"] = {{"steps", c.sample.sampler.steps},     {"td", c.sample.sampler.td},          {"seed", c.sample.sampler.seed},
                   {"min_pixels", c.sample.min_pixels},   {"steps_first", c.sample.steps_first}, {"steps_rest", c.sample.steps_rest},
                   {"use_ema", c.sample.use_ema}};
    j["metrics"] = {{"boundary_radius", c.metrics.boundary_radius}};
    j["output_dir"] = c.output_dir;
    j["precision"] = to_string(c.precision);
    j["threads"] = c.threads;
    return j;
}

RunConfig run_config_from_json(const json& j)
{
    RunConfig c;
    Section top(j, "");
    if (const json* s = top.sub("scene"))
        read_scene(*s, c.scene);
    if (const json* s = top.sub("video")) {
        Section r(*s, "video");
        r.get("frames", c.video.frames);
        r.get("max_speed", c.video.max_speed);
        r.get("occlusion", c.video.occlusion);
        r.finish();
    }
    if (const json* s = top.sub("data")) {
        Section r(*s, "data");
        r.get("train_size", c.data.train_size);
        r.get("val_size", c.data.val_size);
        r.finish();
    }
    if (const json* s = top.sub("net")) {
        Section r(*s, "net");
        r.get("encoder_width", c.net.encoder_width);
        r.get("feature_dim", c.net.feature_dim);
        r.get("base_width", c.net.base_width);
        r.get("depth", c.net.depth);
        r.get("time_embed_dim", c.net.time_embed_dim);
        r.get("time_hidden", c.net.time_hidden);
        r.get("past_frames", c.net.past_frames);
        r.get_enum("activation", c.net.activation, parse_activation);
        r.finish();
    }
    if (const json* s = top.sub("train")) {
        Section r(*s, "train");
        r.get("input_scale", c.net.codec.scale);
        r.get("class_bits", c.net.codec.class_bits);
        r.get("instance_bits", c.net.codec.instance_bits);
        r.get_enum("loss", c.train.loss, parse_loss);
        r.get("loss_power", c.train.loss_power);
        r.get("lr", c.train.adam.lr);
        r.get("beta1", c.train.adam.beta1);
        r.get("beta2", c.train.adam.beta2);
        r.get("adam_eps", c.train.adam.eps);
        r.get_enum("lr_schedule", c.train.lr_schedule, parse_schedule);
        r.get("ema_decay", c.train.ema_decay);
        r.get("batch_size", c.train.batch_size);
        r.get("steps", c.train.steps);
        r.get("seed", c.train.seed);
        r.get("past_drop", c.train.past_drop);
        r.get("checkpoint_every", c.train.checkpoint_every);
        r.get("log_every", c.train.log_every);
        r.finish();
    }
    if (const json* s = top.sub("sample")) {
        Section r(*s, "sample");
        r.get("steps", c.sample.sampler.steps);
        r.get("td", c.sample.sampler.td);
        r.get("seed", c.sample.sampler.seed);
        r.get("min_pixels", c.sample.min_pixels);
        r.get("steps_first", c.sample.steps_first);
        r.get("steps_rest", c.sample.steps_rest);
        r.get("use_ema", c.sample.use_ema);
        r.finish();
    }
    if (const json* s = top.sub("metrics")) {
        Section r(*s, "metrics");
        r.get("boundary_radius", c.metrics.boundary_radius);
        r.finish();
    }
    top.get("output_dir", c.output_dir);
    top.get_enum("precision", c.precision, parse_precision);
    top.get("threads", c.threads);
    top.finish();
    resolve(c);
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path)
{
    std::ifstream f(path);
    if (!f)
        throw std::runtime_error("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("config " + path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

void save_run_config(const RunConfig& cfg, const std::filesystem::path& path)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f)
        throw std::runtime_error("cannot write " + path.string());
    f << to_json(cfg).dump(2) << "\n";
}

RunConfig with_overrides(const RunConfig& cfg, std::span<const std::string> overrides)
{
    json j = to_json(cfg);
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0)
            throw std::invalid_argument("override '" + o + "' is not of the form section.key=value");
        std::string key = o.substr(0, eq);
        const std::string text = o.substr(eq + 1);
        json value = json::parse(text, nullptr, false);
        if (value.is_discarded())
            value = text;
        std::string ptr = "/" + key;
        std::replace(ptr.begin(), ptr.end(), '.', '/');
        const json::json_pointer jp(ptr);
        if (!j.contains(jp.parent_pointer()) || !j.at(jp.parent_pointer()).is_object())
            throw std::invalid_argument("config: unknown section in override '" + key + "'");
        j[jp] = value;
    }
    return run_config_from_json(j);
}

} // namespace bitseg
