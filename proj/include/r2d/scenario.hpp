#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace r2d {

using OrderedJson = nlohmann::ordered_json;

// COCO-style records. `raw` keeps every field of the source object so a
// load/save round trip is content-identical.
struct CocoImage {
    std::int64_t id = 0;
    OrderedJson raw;
};

struct CocoAnnotation {
    std::int64_t id = 0;
    std::int64_t image_id = 0;
    std::int64_t category_id = 0;
    OrderedJson raw;
};

struct CocoCategory {
    std::int64_t id = 0;
    OrderedJson raw;
};

struct AnnotationSet {
    std::vector<CocoImage> images;
    std::vector<CocoAnnotation> annotations;
    std::vector<CocoCategory> categories;
    OrderedJson extra = OrderedJson::object();  // other top-level keys (info, licenses, ...)

    bool operator==(const AnnotationSet& other) const;
};

/// Throws ParseError for malformed JSON and SpecError naming the offending id
/// for duplicate or dangling references.
AnnotationSet parse_annotations(const std::string& text);
AnnotationSet load_annotations(const std::filesystem::path& path);
std::string annotations_to_json(const AnnotationSet& set);
void save_annotations(const AnnotationSet& set, const std::filesystem::path& path);

/// Inclusive image-id range used to carve train/test partitions.
struct ImageFilter {
    std::optional<std::int64_t> min_image_id;
    std::optional<std::int64_t> max_image_id;

    bool accepts(std::int64_t image_id) const;
};

// Spec file: {"name": str, "steps": [[class_id, ...], ...], "source": path,
//             "test_filter": {"min_image_id": int, "max_image_id": int}}  (test_filter optional)
struct ScenarioSpec {
    std::string name;
    std::vector<std::vector<std::int64_t>> steps;
    std::filesystem::path source;
    std::optional<ImageFilter> filter;
};

/// `source` is resolved relative to the spec file's directory.
ScenarioSpec load_scenario_spec(const std::filesystem::path& path);
ScenarioSpec parse_scenario_spec(const std::string& text, const std::filesystem::path& base_dir = {});

/// Throws SpecError when steps overlap or name classes missing from `annos`.
void check_spec(const ScenarioSpec& spec, const AnnotationSet& annos);

/// One annotation set per step: only that step's annotations, the images
/// carrying at least one of them, and that step's categories (source order kept).
std::vector<AnnotationSet> split_annotations(const AnnotationSet& annos, const ScenarioSpec& spec);

struct ManifestStep {
    std::string path;  // relative to the manifest's directory
    std::size_t images = 0;
    std::size_t annotations = 0;
    std::vector<std::int64_t> classes;
};

struct SplitManifest {
    std::string name;
    std::string source;
    std::optional<ImageFilter> filter;
    std::vector<ManifestStep> steps;
};

/// Writes `<name>_step<k>.json` per step and `<name>_manifest.json` into `out_dir`.
SplitManifest split_by_steps(const AnnotationSet& annos, const ScenarioSpec& spec,
                             const std::filesystem::path& out_dir);

std::string manifest_to_json(const SplitManifest& m);
SplitManifest load_manifest(const std::filesystem::path& path);

struct SplitReport {
    bool pass = true;
    std::vector<std::string> errors;
};

/// Re-derives every count and invariant from the files on disk; order-insensitive.
SplitReport validate_split(const SplitManifest& manifest, const std::filesystem::path& manifest_dir,
                           const AnnotationSet& source);

/// Synthetic COCO source: `teams` give the players per team, classes are numbered from 1.
AnnotationSet make_toy_source(const std::vector<int>& team_sizes, int images, std::uint64_t seed);

}  // namespace r2d
