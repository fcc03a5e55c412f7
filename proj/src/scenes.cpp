#include "bitseg/scenes.hpp"
#include "bitseg/parallel.hpp"
#include "bitseg/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace bitseg {

std::vector<ClassSpec> SceneConfig::default_classes()
{
    return {
        {"null", false, {0.f, 0.f, 0.f}},
        {"water", false, {0.20f, 0.35f, 0.80f}},
        {"grass", false, {0.30f, 0.65f, 0.25f}},
        {"disk", true, {0.90f, 0.25f, 0.20f}},
        {"block", true, {0.95f, 0.85f, 0.25f}},
    };
}

std::vector<bool> SceneConfig::thing_flags() const
{
    std::vector<bool> out;
    for (const auto& c : classes)
        out.push_back(c.thing);
    return out;
}

void validate(const SceneConfig& cfg)
{
    auto fail = [](const std::string& m) { throw std::invalid_argument("scene: " + m); };
    if (cfg.height <= 0 || cfg.width <= 0)
        fail("height and width must be positive");
    if (cfg.classes.size() < 2 || cfg.classes.size() > 65535)
        fail("need the null class plus at least one class");
    if (cfg.classes[0].thing)
        fail("class 0 is the null class and cannot be a thing");
    bool any_stuff = false;
    for (std::size_t c = 1; c < cfg.classes.size(); ++c)
        any_stuff |= !cfg.classes[c].thing;
    if (!any_stuff)
        fail("at least one stuff class is required for the background");
    bool any_kind = false;
    for (int c : cfg.shape_class) {
        if (c == 0)
            continue;
        if (c < 0 || c >= cfg.num_classes() || !cfg.classes[static_cast<std::size_t>(c)].thing)
            fail("shape_class entries must name thing classes (or 0 to disable)");
        any_kind = true;
    }
    if (cfg.max_instances < 1 || cfg.max_instances > 65535)
        fail("max_instances must be in [1, 65535]");
    if (cfg.min_shapes < 0 || cfg.max_shapes < cfg.min_shapes)
        fail("need 0 <= min_shapes <= max_shapes");
    if (cfg.max_shapes > cfg.max_instances)
        fail("max_shapes exceeds max_instances");
    if (cfg.max_shapes > 0 && !any_kind)
        fail("shapes requested but every shape kind is disabled");
    if (cfg.min_size < 1 || cfg.max_size < cfg.min_size)
        fail("need 1 <= min_size <= max_size");
    if (cfg.max_size > std::min(cfg.height, cfg.width))
        fail("max_size exceeds the image size");
    if (cfg.max_stuff_regions < 1 || cfg.max_stuff_regions > 2)
        fail("max_stuff_regions must be 1 or 2");
    if (!(cfg.min_visible >= 0.0 && cfg.min_visible <= 1.0))
        fail("min_visible must be in [0, 1]");
    if (!(cfg.color_jitter >= 0.0) || !(cfg.pixel_noise >= 0.0))
        fail("color_jitter and pixel_noise must be >= 0");
}

void validate(const VideoConfig& cfg)
{
    if (cfg.frames < 1)
        throw std::invalid_argument("video: frames must be >= 1");
    if (!(cfg.max_speed >= 0.0))
        throw std::invalid_argument("video: max_speed must be >= 0");
}

namespace {

struct Shape {
    ShapeKind kind;
    int cls;
    double cx, cy;
    double a, b;                     // rectangle half extents or disk radius (a)
    std::array<double, 6> tri{};     // triangle vertices relative to the center
    std::array<float, 3> color;
    int vx = 0, vy = 0;              // whole pixels per frame
};

double cross(double ax, double ay, double bx, double by) { return ax * by - ay * bx; }

bool covers(const Shape& s, double px, double py)
{
    const double x = px - s.cx, y = py - s.cy;
    switch (s.kind) {
    case ShapeKind::rectangle:
        return std::abs(x) <= s.a && std::abs(y) <= s.b;
    case ShapeKind::disk:
        return x * x + y * y <= s.a * s.a;
    case ShapeKind::triangle: {
        const auto& t = s.tri;
        const double d0 = cross(t[2] - t[0], t[3] - t[1], x - t[0], y - t[1]);
        const double d1 = cross(t[4] - t[2], t[5] - t[3], x - t[2], y - t[3]);
        const double d2 = cross(t[0] - t[4], t[1] - t[5], x - t[4], y - t[5]);
        return (d0 >= 0 && d1 >= 0 && d2 >= 0) || (d0 <= 0 && d1 <= 0 && d2 <= 0);
    }
    }
    return false;
}

double extent(const Shape& s)
{
    switch (s.kind) {
    case ShapeKind::rectangle:
        return std::max(s.a, s.b);
    case ShapeKind::disk:
        return s.a;
    case ShapeKind::triangle: {
        double r = 0;
        for (int i = 0; i < 3; ++i)
            r = std::max(r, std::hypot(s.tri[2 * i], s.tri[2 * i + 1]));
        return r;
    }
    }
    return 0;
}

// Pixels covered by shape `s` in frame f, as flat indices.
std::vector<std::size_t> raster(const SceneConfig& cfg, Shape s, int f)
{
    s.cx += f * s.vx;
    s.cy += f * s.vy;
    const double r = extent(s) + 1;
    const int y0 = std::max(0, static_cast<int>(std::floor(s.cy - r)));
    const int y1 = std::min(cfg.height - 1, static_cast<int>(std::ceil(s.cy + r)));
    const int x0 = std::max(0, static_cast<int>(std::floor(s.cx - r)));
    const int x1 = std::min(cfg.width - 1, static_cast<int>(std::ceil(s.cx + r)));
    std::vector<std::size_t> out;
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if (covers(s, x + 0.5, y + 0.5))
                out.push_back(static_cast<std::size_t>(y) * static_cast<std::size_t>(cfg.width) + static_cast<std::size_t>(x));
    return out;
}

// owner[f][pixel] = index of the topmost shape or -1.
using Owners = std::vector<std::vector<int>>;

Owners paint(const SceneConfig& cfg, const std::vector<Shape>& shapes, int frames)
{
    const std::size_t S = static_cast<std::size_t>(cfg.height) * static_cast<std::size_t>(cfg.width);
    Owners owners(static_cast<std::size_t>(frames), std::vector<int>(S, -1));
    for (int f = 0; f < frames; ++f)
        for (std::size_t i = 0; i < shapes.size(); ++i)
            for (std::size_t p : raster(cfg, shapes[i], f))
                owners[static_cast<std::size_t>(f)][p] = static_cast<int>(i);
    return owners;
}

// Checks the layout rules for every shape: enough of it is visible in the
// first frame, and it is visible on a prefix of the frames (so an id never
// disappears and comes back). Without occlusion shapes may not overlap.
bool acceptable(const SceneConfig& cfg, const std::vector<Shape>& shapes, int frames, bool occlusion)
{
    const Owners owners = paint(cfg, shapes, frames);
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        bool gone = false;
        for (int f = 0; f < frames; ++f) {
            const auto own = raster(cfg, shapes[i], f);
            std::size_t visible = 0;
            for (std::size_t p : own)
                visible += owners[static_cast<std::size_t>(f)][p] == static_cast<int>(i);
            if (!occlusion && visible != own.size())
                return false;
            if (f == 0 && (visible == 0 || static_cast<double>(visible) < cfg.min_visible * static_cast<double>(own.size())))
                return false;
            if (visible == 0)
                gone = true;
            else if (gone)
                return false;
        }
    }
    return true;
}

Shape propose(const SceneConfig& cfg, std::mt19937_64& rng, double max_speed)
{
    std::vector<ShapeKind> kinds;
    for (int k = 0; k < 3; ++k)
        if (cfg.shape_class[static_cast<std::size_t>(k)] != 0)
            kinds.push_back(static_cast<ShapeKind>(k));
    std::uniform_int_distribution<std::size_t> pick_kind(0, kinds.size() - 1);
    std::uniform_real_distribution<double> size(cfg.min_size, cfg.max_size);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    Shape s{};
    s.kind = kinds[pick_kind(rng)];
    s.cls = cfg.shape_class[static_cast<std::size_t>(s.kind)];
    const double d = size(rng);
    switch (s.kind) {
    case ShapeKind::rectangle:
        s.a = d / 2;
        s.b = size(rng) / 2;
        break;
    case ShapeKind::disk:
        s.a = d / 2;
        break;
    case ShapeKind::triangle: {
        const double phi = unit(rng) * 2 * std::numbers::pi;
        for (int i = 0; i < 3; ++i) {
            const double ang = phi + i * 2 * std::numbers::pi / 3 + (unit(rng) - 0.5) * 0.6;
            const double rad = d / 2 * (0.8 + 0.2 * unit(rng));
            s.tri[static_cast<std::size_t>(2 * i)] = rad * std::cos(ang);
            s.tri[static_cast<std::size_t>(2 * i + 1)] = rad * std::sin(ang);
        }
        break;
    }
    }
    const double r = std::min(extent(s), std::min(cfg.width, cfg.height) / 2.0);
    s.cx = r + unit(rng) * (cfg.width - 2 * r);
    s.cy = r + unit(rng) * (cfg.height - 2 * r);
    const auto& base = cfg.classes[static_cast<std::size_t>(s.cls)].color;
    for (std::size_t c = 0; c < 3; ++c)
        s.color[c] = static_cast<float>(std::clamp(base[c] + (unit(rng) * 2 - 1) * cfg.color_jitter, 0.0, 1.0));
    const int vmax = static_cast<int>(std::floor(max_speed));
    std::uniform_int_distribution<int> vel(-vmax, vmax);
    s.vx = vel(rng);
    s.vy = vel(rng);
    return s;
}

struct Layout {
    std::vector<int> stuff;                    // stuff class per pixel
    std::vector<std::array<float, 3>> stuff_color; // per pixel
    std::vector<float> noise;                  // [3, H, W]
    std::vector<Shape> shapes;
};

Layout make_layout(const SceneConfig& cfg, std::uint64_t index, int frames, double max_speed, bool occlusion)
{
    validate(cfg);
    std::mt19937_64 rng(derive_seed(cfg.seed, {index}));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const std::size_t H = static_cast<std::size_t>(cfg.height), W = static_cast<std::size_t>(cfg.width), S = H * W;

    Layout L;
    std::vector<int> stuff_classes;
    for (std::size_t c = 1; c < cfg.classes.size(); ++c)
        if (!cfg.classes[c].thing)
            stuff_classes.push_back(static_cast<int>(c));
    std::shuffle(stuff_classes.begin(), stuff_classes.end(), rng);
    const bool split = cfg.max_stuff_regions == 2 && stuff_classes.size() >= 2 && unit(rng) < 0.5;
    const double theta = unit(rng) * 2 * std::numbers::pi;
    const double ox = (0.25 + 0.5 * unit(rng)) * cfg.width, oy = (0.25 + 0.5 * unit(rng)) * cfg.height;
    std::array<std::array<float, 3>, 2> region_color;
    for (std::size_t r = 0; r < 2; ++r) {
        const auto& base = cfg.classes[static_cast<std::size_t>(stuff_classes[std::min(r, stuff_classes.size() - 1)])].color;
        for (std::size_t c = 0; c < 3; ++c)
            region_color[r][c] = static_cast<float>(std::clamp(base[c] + (unit(rng) * 2 - 1) * 0.05, 0.0, 1.0));
    }
    L.stuff.resize(S);
    L.stuff_color.resize(S);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const bool second = split && ((x + 0.5 - ox) * std::cos(theta) + (y + 0.5 - oy) * std::sin(theta) > 0);
            L.stuff[y * W + x] = stuff_classes[second ? 1 : 0];
            L.stuff_color[y * W + x] = region_color[second ? 1 : 0];
        }

    L.noise.resize(3 * S);
    for (auto& v : L.noise)
        v = static_cast<float>((unit(rng) * 2 - 1) * cfg.pixel_noise);

    std::uniform_int_distribution<int> count(cfg.min_shapes, cfg.max_shapes);
    const int n = count(rng);
    for (int i = 0; i < n; ++i) {
        for (int attempt = 0; attempt < 40; ++attempt) {
            L.shapes.push_back(propose(cfg, rng, max_speed));
            if (acceptable(cfg, L.shapes, frames, occlusion))
                break;
            L.shapes.pop_back();
        }
    }
    return L;
}

SceneSample render(const SceneConfig& cfg, const Layout& L, const std::vector<int>& owner)
{
    const std::size_t S = owner.size();
    SceneSample out{Image(cfg.height, cfg.width), PanopticMask(cfg.height, cfg.width, cfg.num_classes(), cfg.max_instances)};
    for (std::size_t p = 0; p < S; ++p) {
        const int o = owner[p];
        const auto& col = o < 0 ? L.stuff_color[p] : L.shapes[static_cast<std::size_t>(o)].color;
        for (std::size_t c = 0; c < 3; ++c)
            out.image.data[c * S + p] = std::clamp(col[c] + L.noise[c * S + p], 0.f, 1.f);
        if (o < 0) {
            out.mask.classes[p] = static_cast<std::uint16_t>(L.stuff[p]);
        } else {
            out.mask.classes[p] = static_cast<std::uint16_t>(L.shapes[static_cast<std::size_t>(o)].cls);
            out.mask.instances[p] = static_cast<std::uint16_t>(o + 1);
        }
    }
    return out;
}

std::string padded(std::size_t i, int width)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%0*zu", width, i);
    return buf;
}

} // namespace

SceneSample gen_scene(const SceneConfig& cfg, std::uint64_t index)
{
    const Layout L = make_layout(cfg, index, 1, 0.0, true);
    return render(cfg, L, paint(cfg, L.shapes, 1)[0]);
}

VideoSample gen_video(const SceneConfig& cfg, const VideoConfig& vcfg, std::uint64_t index)
{
    validate(vcfg);
    // separate stream from gen_scene so image and video datasets are unrelated
    const Layout L = make_layout(cfg, splitmix64(index ^ 0x5ca1ab1e0ddba11ULL), vcfg.frames, vcfg.max_speed, vcfg.occlusion);
    const Owners owners = paint(cfg, L.shapes, vcfg.frames);
    VideoSample out;
    for (int f = 0; f < vcfg.frames; ++f) {
        auto s = render(cfg, L, owners[static_cast<std::size_t>(f)]);
        std::vector<int> ident(static_cast<std::size_t>(cfg.max_instances) + 1, -1);
        for (std::uint16_t id : present_instance_ids(s.mask))
            ident[id] = id - 1;
        out.frames.push_back(std::move(s.image));
        out.masks.push_back(std::move(s.mask));
        out.identity.push_back(std::move(ident));
    }
    return out;
}

Split parse_split(const std::string& s)
{
    if (s == "train")
        return Split::train;
    if (s == "val")
        return Split::val;
    throw std::invalid_argument("unknown split '" + s + "' (expected train or val)");
}

std::string split_name(Split s) { return s == Split::train ? "train" : "val"; }

std::vector<std::uint64_t> split_indices(Split split, std::size_t size)
{
    const std::uint64_t base = split == Split::train ? 0 : (std::uint64_t{1} << 32);
    if (size > (std::uint64_t{1} << 32))
        throw std::invalid_argument("split size too large");
    std::vector<std::uint64_t> out(size);
    for (std::size_t i = 0; i < size; ++i)
        out[i] = base + i;
    return out;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& dir)
{
    std::ofstream f(dir / "manifest.txt");
    if (!f)
        throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
    for (const auto& e : entries)
        f << e.index << ' ' << e.frame << ' ' << e.image << ' ' << e.mask << '\n';
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir)
{
    std::ifstream f(dir / "manifest.txt");
    if (!f)
        throw std::runtime_error("missing manifest " + (dir / "manifest.txt").string());
    std::vector<ManifestEntry> out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty())
            continue;
        std::istringstream ss(line);
        ManifestEntry e;
        if (!(ss >> e.index >> e.frame >> e.image >> e.mask))
            throw std::runtime_error((dir / "manifest.txt").string() + ":" + std::to_string(lineno) + ": malformed line");
        out.push_back(std::move(e));
    }
    return out;
}

void write_dataset(const SceneConfig& cfg, const std::optional<VideoConfig>& vcfg, Split split, std::size_t size,
                   const std::filesystem::path& dir, bool png_previews)
{
    validate(cfg);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec)
        throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
    const auto indices = split_indices(split, size);
    const int frames = vcfg ? vcfg->frames : 1;
    std::vector<ManifestEntry> entries(size * static_cast<std::size_t>(frames));
    std::vector<std::string> identity_rows(vcfg ? size : 0);
    parallel_for(size, [&](std::size_t i) {
        const std::string stem = padded(i, 6);
        auto emit = [&](const Image& img, const PanopticMask& m, int f, const std::string& name) {
            write_ppm(img, dir / (name + ".ppm"));
            save_mask(m, dir / (name + ".panm"));
            if (png_previews)
                write_png(overlay(img, m), dir / (name + "_overlay.png"));
            entries[i * static_cast<std::size_t>(frames) + static_cast<std::size_t>(f)] = {indices[i], f, name + ".ppm", name + ".panm"};
        };
        if (!vcfg) {
            const auto s = gen_scene(cfg, indices[i]);
            emit(s.image, s.mask, 0, stem);
            return;
        }
        const auto v = gen_video(cfg, *vcfg, indices[i]);
        std::ostringstream rows;
        for (int f = 0; f < frames; ++f) {
            const auto fi = static_cast<std::size_t>(f);
            emit(v.frames[fi], v.masks[fi], f, stem + "_f" + padded(fi, 2));
            for (std::size_t id = 1; id < v.identity[fi].size(); ++id)
                if (v.identity[fi][id] >= 0)
                    rows << indices[i] << ',' << f << ',' << id << ',' << v.identity[fi][id] << '\n';
        }
        identity_rows[i] = rows.str();
    });
    write_manifest(entries, dir);
    if (vcfg) {
        std::ofstream f(dir / "identity.csv");
        f << "video,frame,instance,object\n";
        for (const auto& r : identity_rows)
            f << r;
    }
}

} // namespace bitseg
