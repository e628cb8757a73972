#include "r2d/scenario.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "r2d/numeric.hpp"
#include "r2d/rng.hpp"

namespace r2d {

namespace fs = std::filesystem;

bool AnnotationSet::operator==(const AnnotationSet& other) const {
    return annotations_to_json(*this) == annotations_to_json(other);
}

namespace {

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ParseError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    out << text;
    if (!out) {
        throw Error("write failed for " + path.string());
    }
}

OrderedJson parse_json(const std::string& text) {
    try {
        return OrderedJson::parse(text);
    } catch (const OrderedJson::parse_error& e) {
        throw ParseError("invalid JSON at byte " + std::to_string(e.byte) + ": " + e.what());
    }
}

}  // namespace

AnnotationSet parse_annotations(const std::string& text) {
    const OrderedJson j = parse_json(text);
    AnnotationSet set;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key != "images" && key != "annotations" && key != "categories") {
                set.extra[key] = value;
            }
        }
        for (const auto& img : j.at("images")) {
            set.images.push_back({img.at("id").get<std::int64_t>(), img});
        }
        for (const auto& cat : j.at("categories")) {
            set.categories.push_back({cat.at("id").get<std::int64_t>(), cat});
        }
        for (const auto& a : j.at("annotations")) {
            set.annotations.push_back({a.at("id").get<std::int64_t>(), a.at("image_id").get<std::int64_t>(),
                                       a.at("category_id").get<std::int64_t>(), a});
        }
    } catch (const OrderedJson::exception& e) {
        throw ParseError(std::string("malformed annotation file: ") + e.what());
    }

    std::set<std::int64_t> image_ids;
    for (const auto& img : set.images) {
        if (!image_ids.insert(img.id).second) {
            throw SpecError("duplicate image id " + std::to_string(img.id));
        }
    }
    std::set<std::int64_t> cat_ids;
    for (const auto& c : set.categories) {
        if (!cat_ids.insert(c.id).second) {
            throw SpecError("duplicate category id " + std::to_string(c.id));
        }
    }
    std::set<std::int64_t> ann_ids;
    for (const auto& a : set.annotations) {
        if (!ann_ids.insert(a.id).second) {
            throw SpecError("duplicate annotation id " + std::to_string(a.id));
        }
        if (image_ids.count(a.image_id) == 0) {
            throw SpecError("annotation " + std::to_string(a.id) + " references missing image id " +
                            std::to_string(a.image_id));
        }
        if (cat_ids.count(a.category_id) == 0) {
            throw SpecError("annotation " + std::to_string(a.id) + " references missing category id " +
                            std::to_string(a.category_id));
        }
    }
    return set;
}

AnnotationSet load_annotations(const fs::path& path) { return parse_annotations(read_file(path)); }

std::string annotations_to_json(const AnnotationSet& set) {
    OrderedJson j;
    OrderedJson images = OrderedJson::array();
    for (const auto& img : set.images) {
        images.push_back(img.raw);
    }
    OrderedJson annotations = OrderedJson::array();
    for (const auto& a : set.annotations) {
        annotations.push_back(a.raw);
    }
    OrderedJson categories = OrderedJson::array();
    for (const auto& c : set.categories) {
        categories.push_back(c.raw);
    }
    for (const auto& [key, value] : set.extra.items()) {
        j[key] = value;
    }
    j["images"] = std::move(images);
    j["annotations"] = std::move(annotations);
    j["categories"] = std::move(categories);
    return j.dump(1) + "\n";
}

void save_annotations(const AnnotationSet& set, const fs::path& path) { write_file(path, annotations_to_json(set)); }

bool ImageFilter::accepts(std::int64_t image_id) const {
    return (!min_image_id || image_id >= *min_image_id) && (!max_image_id || image_id <= *max_image_id);
}

namespace {

OrderedJson filter_to_json(const ImageFilter& f) {
    OrderedJson j = OrderedJson::object();
    if (f.min_image_id) {
        j["min_image_id"] = *f.min_image_id;
    }
    if (f.max_image_id) {
        j["max_image_id"] = *f.max_image_id;
    }
    return j;
}

ImageFilter filter_from_json(const OrderedJson& j) {
    ImageFilter f;
    if (j.contains("min_image_id")) {
        f.min_image_id = j.at("min_image_id").get<std::int64_t>();
    }
    if (j.contains("max_image_id")) {
        f.max_image_id = j.at("max_image_id").get<std::int64_t>();
    }
    return f;
}

}  // namespace

ScenarioSpec parse_scenario_spec(const std::string& text, const fs::path& base_dir) {
    const OrderedJson j = parse_json(text);
    ScenarioSpec spec;
    try {
        spec.name = j.at("name").get<std::string>();
        spec.steps = j.at("steps").get<std::vector<std::vector<std::int64_t>>>();
        const fs::path src = j.at("source").get<std::string>();
        spec.source = src.is_absolute() || base_dir.empty() ? src : base_dir / src;
        if (j.contains("test_filter")) {
            spec.filter = filter_from_json(j.at("test_filter"));
        }
    } catch (const OrderedJson::exception& e) {
        throw ParseError(std::string("malformed scenario spec: ") + e.what());
    }
    if (spec.name.empty() || spec.steps.empty()) {
        throw SpecError("scenario spec needs a name and at least one step");
    }
    return spec;
}

ScenarioSpec load_scenario_spec(const fs::path& path) {
    return parse_scenario_spec(read_file(path), path.parent_path());
}

void check_spec(const ScenarioSpec& spec, const AnnotationSet& annos) {
    std::set<std::int64_t> known;
    for (const auto& c : annos.categories) {
        known.insert(c.id);
    }
    std::set<std::int64_t> seen;
    for (std::size_t k = 0; k < spec.steps.size(); ++k) {
        if (spec.steps[k].empty()) {
            throw SpecError("step " + std::to_string(k + 1) + " lists no classes");
        }
        for (std::int64_t c : spec.steps[k]) {
            if (known.count(c) == 0) {
                throw SpecError("class " + std::to_string(c) + " in step " + std::to_string(k + 1) +
                                " is absent from the source categories");
            }
            if (!seen.insert(c).second) {
                throw SpecError("class " + std::to_string(c) + " appears in more than one step");
            }
        }
    }
}

std::vector<AnnotationSet> split_annotations(const AnnotationSet& annos, const ScenarioSpec& spec) {
    check_spec(spec, annos);
    std::vector<AnnotationSet> out;
    for (const auto& step : spec.steps) {
        const std::set<std::int64_t> classes(step.begin(), step.end());
        AnnotationSet part;
        part.extra = annos.extra;
        std::set<std::int64_t> used_images;
        for (const auto& a : annos.annotations) {
            if (classes.count(a.category_id) != 0 && (!spec.filter || spec.filter->accepts(a.image_id))) {
                part.annotations.push_back(a);
                used_images.insert(a.image_id);
            }
        }
        for (const auto& img : annos.images) {
            if (used_images.count(img.id) != 0) {
                part.images.push_back(img);
            }
        }
        for (const auto& c : annos.categories) {
            if (classes.count(c.id) != 0) {
                part.categories.push_back(c);
            }
        }
        out.push_back(std::move(part));
    }
    return out;
}

SplitManifest split_by_steps(const AnnotationSet& annos, const ScenarioSpec& spec, const fs::path& out_dir) {
    const auto parts = split_annotations(annos, spec);
    fs::create_directories(out_dir);
    SplitManifest m;
    m.name = spec.name;
    m.source = spec.source.string();
    m.filter = spec.filter;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        ManifestStep step;
        step.path = spec.name + "_step" + std::to_string(k + 1) + ".json";
        step.images = parts[k].images.size();
        step.annotations = parts[k].annotations.size();
        step.classes = spec.steps[k];
        save_annotations(parts[k], out_dir / step.path);
        m.steps.push_back(std::move(step));
    }
    write_file(out_dir / (spec.name + "_manifest.json"), manifest_to_json(m));
    return m;
}

std::string manifest_to_json(const SplitManifest& m) {
    OrderedJson j;
    j["name"] = m.name;
    j["source"] = m.source;
    if (m.filter) {
        j["test_filter"] = filter_to_json(*m.filter);
    }
    OrderedJson steps = OrderedJson::array();
    for (const auto& s : m.steps) {
        OrderedJson e;
        e["path"] = s.path;
        e["images"] = s.images;
        e["annotations"] = s.annotations;
        e["classes"] = s.classes;
        steps.push_back(std::move(e));
    }
    j["steps"] = std::move(steps);
    return j.dump(1) + "\n";
}

SplitManifest load_manifest(const fs::path& path) {
    const OrderedJson j = parse_json(read_file(path));
    SplitManifest m;
    try {
        m.name = j.at("name").get<std::string>();
        m.source = j.at("source").get<std::string>();
        if (j.contains("test_filter")) {
            m.filter = filter_from_json(j.at("test_filter"));
        }
        for (const auto& s : j.at("steps")) {
            m.steps.push_back({s.at("path").get<std::string>(), s.at("images").get<std::size_t>(),
                               s.at("annotations").get<std::size_t>(),
                               s.at("classes").get<std::vector<std::int64_t>>()});
        }
    } catch (const OrderedJson::exception& e) {
        throw ParseError(std::string("malformed manifest: ") + e.what());
    }
    return m;
}

SplitReport validate_split(const SplitManifest& manifest, const fs::path& manifest_dir, const AnnotationSet& source) {
    SplitReport report;
    auto fail = [&](std::string msg) {
        report.pass = false;
        report.errors.push_back(std::move(msg));
    };

    std::map<std::int64_t, const CocoAnnotation*> source_ann;
    for (const auto& a : source.annotations) {
        source_ann[a.id] = &a;
    }
    std::set<std::int64_t> spec_classes;
    for (const auto& s : manifest.steps) {
        for (std::int64_t c : s.classes) {
            if (!spec_classes.insert(c).second) {
                fail("class " + std::to_string(c) + " listed in more than one step");
            }
        }
    }

    std::map<std::int64_t, std::size_t> owner;  // annotation id -> step
    for (std::size_t k = 0; k < manifest.steps.size(); ++k) {
        const auto& step = manifest.steps[k];
        const std::string tag = "step " + std::to_string(k + 1);
        AnnotationSet part;
        try {
            part = load_annotations(manifest_dir / step.path);
        } catch (const Error& e) {
            fail(tag + ": " + e.what());
            continue;
        }
        const std::set<std::int64_t> classes(step.classes.begin(), step.classes.end());
        std::set<std::int64_t> cats;
        for (const auto& c : part.categories) {
            cats.insert(c.id);
        }
        if (cats != classes) {
            fail(tag + ": category table differs from the manifest class list");
        }
        if (part.images.size() != step.images) {
            fail(tag + ": image count " + std::to_string(part.images.size()) + " != manifest " +
                 std::to_string(step.images));
        }
        if (part.annotations.size() != step.annotations) {
            fail(tag + ": annotation count " + std::to_string(part.annotations.size()) + " != manifest " +
                 std::to_string(step.annotations));
        }
        std::set<std::int64_t> used_images;
        for (const auto& a : part.annotations) {
            used_images.insert(a.image_id);
            if (classes.count(a.category_id) == 0) {
                fail(tag + ": annotation " + std::to_string(a.id) + " has out-of-step class " +
                     std::to_string(a.category_id));
            }
            const auto [it, fresh] = owner.emplace(a.id, k);
            if (!fresh) {
                fail("annotation " + std::to_string(a.id) + " appears in step " + std::to_string(it->second + 1) +
                     " and " + tag);
            }
            const auto src = source_ann.find(a.id);
            if (src == source_ann.end()) {
                fail(tag + ": annotation " + std::to_string(a.id) + " is not in the source");
            } else if (src->second->raw != a.raw) {
                fail(tag + ": annotation " + std::to_string(a.id) + " differs from the source");
            }
        }
        for (const auto& img : part.images) {
            if (used_images.count(img.id) == 0) {
                fail(tag + ": image " + std::to_string(img.id) + " carries no retained annotation");
            }
        }
    }

    // Conservation: every source annotation of a spec class lands in exactly one step.
    for (const auto& a : source.annotations) {
        const bool expected =
            spec_classes.count(a.category_id) != 0 && (!manifest.filter || manifest.filter->accepts(a.image_id));
        const bool present = owner.count(a.id) != 0;
        if (expected && !present) {
            fail("source annotation " + std::to_string(a.id) + " is missing from every step");
        } else if (!expected && present) {
            fail("annotation " + std::to_string(a.id) + " should not be retained");
        }
    }
    return report;
}

AnnotationSet make_toy_source(const std::vector<int>& team_sizes, int images, std::uint64_t seed) {
    Rng rng(Rng::derive(seed, 0x7E57));
    AnnotationSet set;
    set.extra["info"] = {{"description", "synthetic player detection source"}, {"version", "1.0"}};
    std::vector<std::int64_t> team_of;
    std::int64_t cid = 1;
    for (std::size_t t = 0; t < team_sizes.size(); ++t) {
        for (int p = 0; p < team_sizes[t]; ++p, ++cid) {
            char name[32];
            std::snprintf(name, sizeof(name), "player_%02lld", static_cast<long long>(cid));
            OrderedJson raw;
            raw["id"] = cid;
            raw["name"] = name;
            raw["supercategory"] = "team_" + std::to_string(t + 1);
            set.categories.push_back({cid, raw});
            team_of.push_back(static_cast<std::int64_t>(t));
        }
    }
    const auto num_teams = static_cast<int>(team_sizes.size());
    std::int64_t ann_id = 1;
    for (int i = 1; i <= images; ++i) {
        OrderedJson img;
        img["id"] = i;
        img["file_name"] = "frame_" + std::to_string(i) + ".jpg";
        img["width"] = 1280;
        img["height"] = 720;
        set.images.push_back({i, img});
        // A broadcast frame shows two teams; players are drawn from those.
        const int home = rng.uniform_int(0, num_teams - 1);
        const int away = (home + rng.uniform_int(1, std::max(1, num_teams - 1))) % num_teams;
        const int count = rng.uniform_int(3, 10);
        for (int k = 0; k < count; ++k) {
            const int team = rng.uniform_int(0, 1) == 0 ? home : away;
            std::vector<std::int64_t> members;
            for (std::size_t c = 0; c < team_of.size(); ++c) {
                if (team_of[c] == team) {
                    members.push_back(static_cast<std::int64_t>(c) + 1);
                }
            }
            if (members.empty()) {
                continue;
            }
            const std::int64_t cat = members[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<int>(members.size()) - 1))];
            const int w = rng.uniform_int(30, 120);
            const int h = rng.uniform_int(80, 260);
            const int x = rng.uniform_int(0, 1280 - w);
            const int y = rng.uniform_int(0, 720 - h);
            OrderedJson a;
            a["id"] = ann_id;
            a["image_id"] = i;
            a["category_id"] = cat;
            a["bbox"] = {x, y, w, h};
            a["area"] = w * h;
            a["iscrowd"] = 0;
            set.annotations.push_back({ann_id, i, cat, a});
            ++ann_id;
        }
    }
    return set;
}

}  // namespace r2d
