#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "aggdet/ablation.hpp"
#include "aggdet/catalog.hpp"
#include "aggdet/errors.hpp"
#include "aggdet/evaluation.hpp"
#include "aggdet/latency.hpp"
#include "aggdet/pipeline.hpp"
#include "aggdet/prototypes.hpp"
#include "aggdet/synthetic.hpp"

namespace aggdet {

using ojson = nlohmann::ordered_json;

inline constexpr int kDumpVersion = 1;
inline constexpr int kDetectionsVersion = 1;
inline constexpr int kGroundTruthVersion = 1;
inline constexpr int kBankVersion = 1;
inline constexpr int kEvalVersion = 1;

inline constexpr std::uint32_t kRecordMagic = 0x52474741;  // "AGGR"
inline constexpr std::uint32_t kTrailerMagic = 0x444E4541;  // "AEND"

// ---------------------------------------------------------------------------
// Small JSON helpers

namespace detail {

template <typename T>
T json_get(const ojson& j, const char* key, const std::string& where) {
    auto it = j.find(key);
    if (it == j.end()) throw FormatError(where + ": missing field '" + key + "'");
    try {
        return it->get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(where + ": field '" + key + "' has the wrong type (" + e.what() + ")");
    }
}

inline Vector json_vector(const ojson& j, const char* key, const std::string& where) {
    auto v = json_get<std::vector<double>>(j, key, where);
    if (!all_finite(v)) throw NonFiniteError(where + ": non-finite value in '" + key + "'");
    return v;
}

inline ojson box_json(const BoundingBox& b) { return ojson::array({b.x1, b.y1, b.x2, b.y2}); }

inline BoundingBox box_from_json(const ojson& j, const std::string& where) {
    if (!j.is_array() || j.size() != 4) throw FormatError(where + ": box must be an array of 4 numbers");
    double v[4];
    for (std::size_t i = 0; i < 4; ++i) {
        if (!j[i].is_number()) throw FormatError(where + ": box coordinate is not a number");
        v[i] = j[i].get<double>();
        if (!std::isfinite(v[i])) throw NonFiniteError(where + ": non-finite box coordinate");
    }
    try {
        return {v[0], v[1], v[2], v[3]};
    } catch (const ContractError& e) {
        throw FormatError(where + ": " + e.what());
    }
}

inline void check_format(const ojson& j, const char* format, int version, const std::string& where) {
    const auto f = json_get<std::string>(j, "format", where);
    if (f != format) throw FormatError(where + ": expected format '" + format + "', found '" + f + "'");
    const auto v = json_get<int>(j, "version", where);
    if (v != version) {
        throw VersionError(where + ": unsupported " + format + " version " + std::to_string(v) + " (supported: " +
                           std::to_string(version) + ")");
    }
}

inline ojson parse_json(const std::string& text, const std::string& where) {
    try {
        return ojson::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(where + ": invalid JSON (" + e.what() + ")");
    }
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    return out;
}

inline void write_file(const std::string& path, const std::string& text) {
    auto out = open_out(path);
    out << text;
    if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Catalog and config

inline ojson catalog_json(const ClassCatalog& catalog, bool with_embeddings) {
    ojson arr = ojson::array();
    for (const auto& e : catalog.classes()) {
        ojson c;
        c["id"] = e.id;
        c["name"] = e.name;
        c["split"] = to_string(e.split);
        if (with_embeddings) c["embedding"] = e.text;
        arr.push_back(std::move(c));
    }
    return arr;
}

inline ClassCatalog catalog_from_json(const ojson& arr, bool with_embeddings, const std::string& where) {
    if (!arr.is_array()) throw FormatError(where + ": 'classes' must be an array");
    std::vector<ClassEntry> entries;
    for (const auto& c : arr) {
        ClassEntry e;
        e.id = detail::json_get<int>(c, "id", where);
        e.name = c.value("name", std::string{});
        try {
            e.split = parse_split(detail::json_get<std::string>(c, "split", where));
        } catch (const ContractError& err) {
            throw FormatError(where + ": " + err.what());
        }
        if (with_embeddings) e.text = detail::json_vector(c, "embedding", where);
        entries.push_back(std::move(e));
    }
    try {
        return ClassCatalog(std::move(entries), false);
    } catch (const ContractError& err) {
        throw FormatError(where + ": " + err.what());
    }
}

inline ojson config_json(const PipelineConfig& c) {
    ojson j;
    j["k"] = c.k;
    j["alpha"] = c.alpha;
    j["gamma"] = c.gamma;
    j["temperature"] = c.temperature;
    j["proposal_nms_iou"] = c.proposal_nms_iou;
    j["class_nms_iou"] = c.class_nms_iou;
    j["proposal_keep_max"] = c.proposal_keep_max;
    j["detections_per_image"] = c.detections_per_image;
    j["score_threshold"] = c.score_threshold;
    j["mode"] = to_string(c.mode);
    j["arp_lq"] = c.switches.arp_lq;
    j["aoc_vs"] = c.switches.aoc_vs;
    j["aoc_lq"] = c.switches.aoc_lq;
    j["normalize_embeddings"] = c.normalize_embeddings;
    j["trivial_offset"] = c.trivial_offset ? ojson(*c.trivial_offset) : ojson(nullptr);
    return j;
}

/// Overlays the keys present in `j` onto `c`. Unknown keys are rejected.
inline void apply_config_json(const ojson& j, PipelineConfig& c) {
    if (!j.is_object()) throw UsageError("config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& key = it.key();
        const ojson& v = it.value();
        try {
            if (key == "k") c.k = v.get<std::size_t>();
            else if (key == "alpha") c.alpha = v.get<double>();
            else if (key == "gamma") c.gamma = v.get<double>();
            else if (key == "temperature") c.temperature = v.get<double>();
            else if (key == "proposal_nms_iou") c.proposal_nms_iou = v.get<double>();
            else if (key == "class_nms_iou") c.class_nms_iou = v.get<double>();
            else if (key == "proposal_keep_max") c.proposal_keep_max = v.get<std::size_t>();
            else if (key == "detections_per_image") c.detections_per_image = v.get<std::size_t>();
            else if (key == "score_threshold") c.score_threshold = v.get<double>();
            else if (key == "mode") c.mode = parse_mode(v.get<std::string>());
            else if (key == "arp_lq") c.switches.arp_lq = v.get<bool>();
            else if (key == "aoc_vs") c.switches.aoc_vs = v.get<bool>();
            else if (key == "aoc_lq") c.switches.aoc_lq = v.get<bool>();
            else if (key == "normalize_embeddings") c.normalize_embeddings = v.get<bool>();
            else if (key == "trivial_offset") {
                if (v.is_null()) c.trivial_offset.reset();
                else c.trivial_offset = v.get<double>();
            } else {
                throw UsageError("unknown config key '" + key + "'");
            }
        } catch (const nlohmann::json::exception&) {
            throw UsageError("config key '" + key + "' has the wrong type");
        }
    }
}

// ---------------------------------------------------------------------------
// Dump file: text preamble and JSON header line, then binary records.

struct DumpHeader {
    std::size_t dim = 0;
    bool normalized = false;
    std::string activation = "sigmoid";
    double temperature = 1.0;
    ClassCatalog catalog;
};

namespace detail {

class BinaryOut {
public:
    explicit BinaryOut(std::ostream& os) : os_(os) {}

    void u32(std::uint32_t v) {
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        os_.write(reinterpret_cast<const char*>(b), 4);
    }
    void u64(std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        os_.write(reinterpret_cast<const char*>(b), 8);
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
    void bytes(const std::string& s) { os_.write(s.data(), static_cast<std::streamsize>(s.size())); }

private:
    std::ostream& os_;
};

class BinaryIn {
public:
    BinaryIn(std::istream& is, std::uint64_t offset) : is_(&is), offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

    void exact(void* dst, std::size_t n, const char* what) {
        is_->read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        const auto got = static_cast<std::size_t>(is_->gcount());
        if (got != n) {
            throw TruncationError(offset_ + got, std::string("dump truncated at byte ") + std::to_string(offset_ + got) +
                                                     " while reading " + what);
        }
        offset_ += n;
    }
    std::uint32_t u32(const char* what) {
        unsigned char b[4];
        exact(b, 4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }
    std::uint64_t u64(const char* what) {
        unsigned char b[8];
        exact(b, 8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }
    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

    /// Reads `n` little-endian f32 values widened to double.
    void f32_block(double* dst, std::size_t n, const char* what) {
        buf_.resize(n * 4);
        exact(buf_.data(), buf_.size(), what);
        for (std::size_t i = 0; i < n; ++i) {
            const unsigned char* b = buf_.data() + 4 * i;
            const std::uint32_t u = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                                    (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
            dst[i] = static_cast<double>(std::bit_cast<float>(u));
        }
    }

private:
    std::istream* is_;
    std::uint64_t offset_;
    std::vector<unsigned char> buf_;
};

}  // namespace detail

inline ojson dump_header_json(const DumpHeader& h) {
    ojson j;
    j["format"] = "aggdet-dump";
    j["version"] = kDumpVersion;
    j["dim"] = h.dim;
    j["normalized"] = h.normalized;
    j["calibration"] = {{"activation", h.activation}, {"temperature", h.temperature}};
    j["classes"] = catalog_json(h.catalog, true);
    return j;
}

/// Streams image records into a dump. `finish()` writes the trailer; the
/// destructor calls it if the caller did not.
class DumpWriter {
public:
    DumpWriter(const std::string& path, const DumpHeader& header)
        : path_(path), out_(detail::open_out(path)), bin_(out_), header_(header) {
        if (header_.catalog.dim() != header_.dim) throw ContractError("dump header dimension disagrees with catalog");
        out_ << "AGGDET-DUMP " << kDumpVersion << "\n" << dump_header_json(header_).dump() << "\n";
    }

    DumpWriter(const DumpWriter&) = delete;
    DumpWriter& operator=(const DumpWriter&) = delete;

    ~DumpWriter() {
        if (!finished_) {
            try {
                finish();
            } catch (...) {
            }
        }
    }

    void write(const ImageRecord& r) {
        const std::size_t m = r.proposals.size();
        const std::size_t nc = header_.catalog.size();
        for (const auto& p : r.proposals) {
            if (p.feature.size() != header_.dim) {
                throw DimensionError(r.image_id, "image '" + r.image_id + "': feature dimension " +
                                                     std::to_string(p.feature.size()) + " does not match header " +
                                                     std::to_string(header_.dim));
            }
        }
        if (r.has_logits() && r.raw_logits.size() != m * nc) {
            throw DimensionError(r.image_id, "image '" + r.image_id + "': logits do not match the catalog");
        }
        if (r.refined.boxes.size() != m * r.refined.per_proposal) {
            throw DimensionError(r.image_id, "image '" + r.image_id + "': refined boxes do not match proposals");
        }
        bin_.u32(kRecordMagic);
        bin_.u32(static_cast<std::uint32_t>(r.image_id.size()));
        bin_.bytes(r.image_id);
        bin_.f64(r.width);
        bin_.f64(r.height);
        bin_.u32(static_cast<std::uint32_t>(m));
        bin_.u32(static_cast<std::uint32_t>(header_.dim));
        bin_.u32(static_cast<std::uint32_t>(r.refined.per_proposal));
        bin_.u32(static_cast<std::uint32_t>(r.has_logits() ? nc : 0));
        for (const auto& p : r.proposals) {
            bin_.f64(p.box.x1);
            bin_.f64(p.box.y1);
            bin_.f64(p.box.x2);
            bin_.f64(p.box.y2);
            bin_.f64(p.objectness);
        }
        for (const auto& p : r.proposals) {
            for (double x : p.feature) bin_.f32(x);
        }
        for (const auto& b : r.refined.boxes) {
            bin_.f64(b.x1);
            bin_.f64(b.y1);
            bin_.f64(b.x2);
            bin_.f64(b.y2);
        }
        for (double x : r.raw_logits) bin_.f32(x);
        ++count_;
        if (!out_) throw IoError("write to '" + path_ + "' failed");
    }

    void finish() {
        if (finished_) return;
        finished_ = true;
        bin_.u32(kTrailerMagic);
        bin_.u64(count_);
        out_.flush();
        if (!out_) throw IoError("write to '" + path_ + "' failed");
    }

private:
    std::string path_;
    std::ofstream out_;
    detail::BinaryOut bin_;
    DumpHeader header_;
    std::uint64_t count_ = 0;
    bool finished_ = false;
};

/// Sequential dump reader holding one record at a time.
class DumpReader {
public:
    explicit DumpReader(const std::string& path) : path_(path), in_(path, std::ios::binary), bin_(in_, 0) {
        if (!in_) throw IoError("cannot open '" + path + "' for reading");
        std::string magic_line;
        if (!std::getline(in_, magic_line)) throw TruncationError(0, path + ": empty dump file");
        std::uint64_t offset = magic_line.size() + 1;
        const std::string prefix = "AGGDET-DUMP ";
        if (magic_line.rfind(prefix, 0) != 0) throw FormatError(path + ": line 1: not an aggdet dump");
        if (magic_line.substr(prefix.size()) != std::to_string(kDumpVersion)) {
            throw VersionError(path + ": line 1: unsupported dump version '" + magic_line.substr(prefix.size()) + "'");
        }
        std::string header_line;
        if (!std::getline(in_, header_line) || in_.eof()) {
            throw TruncationError(offset, path + ": dump truncated inside the header at byte " + std::to_string(offset));
        }
        offset += header_line.size() + 1;
        const std::string where = path + ": line 2";
        const ojson j = detail::parse_json(header_line, where);
        detail::check_format(j, "aggdet-dump", kDumpVersion, where);
        header_.dim = detail::json_get<std::size_t>(j, "dim", where);
        header_.normalized = detail::json_get<bool>(j, "normalized", where);
        const auto& cal = j.at("calibration");
        header_.activation = detail::json_get<std::string>(cal, "activation", where);
        header_.temperature = detail::json_get<double>(cal, "temperature", where);
        if (header_.activation != "sigmoid") {
            throw FormatError(where + ": unsupported activation '" + header_.activation + "' (only sigmoid)");
        }
        if (!(header_.temperature > 0.0) || !std::isfinite(header_.temperature)) {
            throw FormatError(where + ": calibration temperature must be positive");
        }
        header_.catalog = catalog_from_json(detail::json_get<ojson>(j, "classes", where), true, where);
        if (header_.catalog.dim() != header_.dim) {
            throw DimensionError("", where + ": class embeddings have dimension " + std::to_string(header_.catalog.dim()) +
                                         ", header says " + std::to_string(header_.dim));
        }
        bin_ = detail::BinaryIn(in_, offset);
    }

    const DumpHeader& header() const noexcept { return header_; }
    std::uint64_t records_read() const noexcept { return count_; }

    /// Next record, or nullopt after the trailer.
    std::optional<ImageRecord> next() {
        if (done_) return std::nullopt;
        const std::uint64_t start = bin_.offset();
        const std::uint32_t magic = bin_.u32("record marker");
        if (magic == kTrailerMagic) {
            const std::uint64_t n = bin_.u64("trailer");
            if (n != count_) {
                throw FormatError(path_ + ": trailer announces " + std::to_string(n) + " records, read " +
                                  std::to_string(count_));
            }
            done_ = true;
            return std::nullopt;
        }
        if (magic != kRecordMagic) {
            throw FormatError(path_ + ": bad record marker at byte " + std::to_string(start) + " (record " +
                              std::to_string(count_) + ")");
        }
        ImageRecord r;
        const std::uint32_t id_len = bin_.u32("image id length");
        if (id_len > (1u << 20)) throw FormatError(path_ + ": implausible image id length at byte " + std::to_string(start));
        r.image_id.resize(id_len);
        bin_.exact(r.image_id.data(), id_len, "image id");
        const std::string ctx = path_ + ": image '" + r.image_id + "' (record " + std::to_string(count_) + ")";
        r.width = bin_.f64("image width");
        r.height = bin_.f64("image height");
        const std::size_t m = bin_.u32("proposal count");
        const std::size_t fdim = bin_.u32("feature dimension");
        const std::size_t per = bin_.u32("refined boxes per proposal");
        const std::size_t ncols = bin_.u32("logit columns");
        const std::size_t nc = header_.catalog.size();
        if (fdim != header_.dim) {
            throw DimensionError(r.image_id, ctx + ": feature dimension " + std::to_string(fdim) +
                                                 " does not match header dimension " + std::to_string(header_.dim));
        }
        if (per != 0 && per != 1 && per != nc) {
            throw DimensionError(r.image_id, ctx + ": refined boxes per proposal must be 0, 1 or " + std::to_string(nc));
        }
        if (ncols != 0 && ncols != nc) {
            throw DimensionError(r.image_id, ctx + ": " + std::to_string(ncols) + " logit columns for " +
                                                 std::to_string(nc) + " classes");
        }
        if (!std::isfinite(r.width) || !std::isfinite(r.height)) throw NonFiniteError(ctx + ": non-finite image size");

        r.proposals.resize(m);
        for (std::size_t i = 0; i < m; ++i) {
            double v[5];
            for (double& x : v) x = bin_.f64("proposal box");
            for (double x : v) {
                if (!std::isfinite(x)) throw NonFiniteError(ctx + ": non-finite box or objectness at proposal " + std::to_string(i));
            }
            r.proposals[i].box = make_box(v, ctx);
            r.proposals[i].objectness = v[4];
        }
        for (std::size_t i = 0; i < m; ++i) {
            auto& f = r.proposals[i].feature;
            f.resize(fdim);
            bin_.f32_block(f.data(), fdim, "features");
            if (!all_finite(f)) throw NonFiniteError(ctx + ": non-finite feature at proposal " + std::to_string(i));
        }
        r.refined.per_proposal = m > 0 ? per : 0;
        r.refined.boxes.reserve(m * per);
        for (std::size_t i = 0; i < m * per; ++i) {
            double v[4];
            for (double& x : v) x = bin_.f64("refined box");
            for (double x : v) {
                if (!std::isfinite(x)) throw NonFiniteError(ctx + ": non-finite refined box");
            }
            r.refined.boxes.push_back(make_box(v, ctx));
        }
        if (ncols != 0) {
            r.raw_logits.resize(m * ncols);
            bin_.f32_block(r.raw_logits.data(), r.raw_logits.size(), "logits");
            if (!all_finite(r.raw_logits)) throw NonFiniteError(ctx + ": non-finite logit");
        }
        ++count_;
        return r;
    }

private:
    static BoundingBox make_box(const double* v, const std::string& ctx) {
        try {
            return {v[0], v[1], v[2], v[3]};
        } catch (const ContractError& e) {
            throw FormatError(ctx + ": " + e.what());
        }
    }

    std::string path_;
    std::ifstream in_;
    detail::BinaryIn bin_;
    DumpHeader header_;
    std::uint64_t count_ = 0;
    bool done_ = false;
};

inline void save_dump(const std::string& path, const DumpHeader& header, std::span<const ImageRecord> records) {
    DumpWriter w(path, header);
    for (const auto& r : records) w.write(r);
    w.finish();
}

struct LoadedDump {
    DumpHeader header;
    std::vector<ImageRecord> records;
};

inline LoadedDump load_dump(const std::string& path) {
    DumpReader reader(path);
    LoadedDump out;
    out.header = reader.header();
    while (auto r = reader.next()) out.records.push_back(std::move(*r));
    return out;
}

inline DumpHeader synthetic_header(const SyntheticDataset& ds) {
    DumpHeader h;
    h.dim = ds.catalog.dim();
    h.normalized = true;
    h.temperature = ds.spec.temperature;
    h.catalog = ds.catalog;
    return h;
}

// ---------------------------------------------------------------------------
// Ground truth (JSON lines)

inline ojson ground_truth_json(const GroundTruthRecord& g) {
    ojson objs = ojson::array();
    for (const auto& o : g.objects) {
        objs.push_back({{"box", detail::box_json(o.box)}, {"class_id", o.class_id}, {"split", to_string(o.split)}});
    }
    return {{"image_id", g.image_id}, {"objects", std::move(objs)}};
}

inline void save_ground_truth(const std::string& path, std::span<const GroundTruthRecord> records,
                              const ClassCatalog& catalog) {
    auto out = detail::open_out(path);
    ojson header = {{"format", "aggdet-groundtruth"}, {"version", kGroundTruthVersion},
                    {"classes", catalog_json(catalog, false)}};
    out << header.dump() << "\n";
    for (const auto& g : records) out << ground_truth_json(g).dump() << "\n";
    if (!out) throw IoError("write to '" + path + "' failed");
}

struct LoadedGroundTruth {
    ClassCatalog labels;
    std::vector<GroundTruthRecord> records;
};

inline LoadedGroundTruth load_ground_truth(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    LoadedGroundTruth out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string where = path + ": line " + std::to_string(line_no);
        if (line.empty()) continue;
        const ojson j = detail::parse_json(line, where);
        if (line_no == 1) {
            detail::check_format(j, "aggdet-groundtruth", kGroundTruthVersion, where);
            out.labels = catalog_from_json(detail::json_get<ojson>(j, "classes", where), false, where);
            continue;
        }
        GroundTruthRecord g;
        g.image_id = detail::json_get<std::string>(j, "image_id", where);
        for (const auto& o : detail::json_get<ojson>(j, "objects", where)) {
            GroundTruthObject obj;
            obj.box = detail::box_from_json(o.at("box"), where);
            obj.class_id = detail::json_get<int>(o, "class_id", where);
            try {
                obj.split = parse_split(detail::json_get<std::string>(o, "split", where));
            } catch (const ContractError& e) {
                throw FormatError(where + ": " + e.what());
            }
            g.objects.push_back(obj);
        }
        out.records.push_back(std::move(g));
    }
    if (line_no == 0) throw FormatError(path + ": empty ground-truth file");
    return out;
}

// ---------------------------------------------------------------------------
// Detections (JSON lines)

inline ojson detection_json(const Detection& d) {
    const auto& p = d.provenance;
    ojson prov;
    prov["proposal_index"] = p.proposal_index;
    prov["objectness"] = p.objectness;
    prov["quality"] = p.quality;
    prov["raw_similarity"] = p.raw_similarity;
    prov["prototype_similarity"] = p.prototype_similarity;
    prov["regulated_score"] = p.regulated_score;
    ojson j;
    j["box"] = detail::box_json(d.box);
    j["class_id"] = d.class_id;
    j["score"] = d.score;
    j["provenance"] = std::move(prov);
    return j;
}

inline Detection detection_from_json(const ojson& j, const std::string& where) {
    Detection d;
    d.box = detail::box_from_json(j.at("box"), where);
    d.class_id = detail::json_get<int>(j, "class_id", where);
    d.score = detail::json_get<double>(j, "score", where);
    const ojson& p = detail::json_get<ojson>(j, "provenance", where);
    d.provenance.proposal_index = detail::json_get<std::size_t>(p, "proposal_index", where);
    d.provenance.objectness = detail::json_get<double>(p, "objectness", where);
    d.provenance.quality = detail::json_get<double>(p, "quality", where);
    d.provenance.raw_similarity = detail::json_get<double>(p, "raw_similarity", where);
    d.provenance.prototype_similarity = detail::json_get<double>(p, "prototype_similarity", where);
    d.provenance.regulated_score = detail::json_get<double>(p, "regulated_score", where);
    return d;
}

inline ojson image_result_json(const ImageResult& r, bool with_proposals) {
    ojson dets = ojson::array();
    for (const auto& d : r.detections) dets.push_back(detection_json(d));
    ojson j;
    j["image_id"] = r.image_id;
    j["detections"] = std::move(dets);
    if (with_proposals) {
        ojson props = ojson::array();
        for (const auto& p : r.proposals) props.push_back({p.box.x1, p.box.y1, p.box.x2, p.box.y2, p.score});
        j["proposals"] = std::move(props);
    }
    return j;
}

/// Writes a detections file incrementally: header line, then one line per image.
class DetectionsWriter {
public:
    DetectionsWriter(const std::string& path, const PipelineConfig& config, const ClassCatalog& catalog,
                     bool with_proposals)
        : path_(path), out_(detail::open_out(path)), with_proposals_(with_proposals) {
        ojson header;
        header["format"] = "aggdet-detections";
        header["version"] = kDetectionsVersion;
        header["config"] = config_json(config);
        header["score_stream"] = config.switches.arp_lq ? "aggregated_objectness" : "objectness";
        header["with_proposals"] = with_proposals;
        header["classes"] = catalog_json(catalog, false);
        out_ << header.dump() << "\n";
    }

    void write(const ImageResult& r) {
        out_ << image_result_json(r, with_proposals_).dump() << "\n";
        if (!out_) throw IoError("write to '" + path_ + "' failed");
    }

private:
    std::string path_;
    std::ofstream out_;
    bool with_proposals_;
};

inline void save_detections(const std::string& path, std::span<const ImageResult> results, const PipelineConfig& config,
                            const ClassCatalog& catalog, bool with_proposals) {
    DetectionsWriter w(path, config, catalog, with_proposals);
    for (const auto& r : results) w.write(r);
}

struct LoadedDetections {
    ojson config;
    std::string score_stream;
    bool with_proposals = false;
    ClassCatalog labels;
    std::vector<ImageResult> images;
};

inline LoadedDetections load_detections(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    LoadedDetections out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string where = path + ": line " + std::to_string(line_no);
        if (line.empty()) continue;
        const ojson j = detail::parse_json(line, where);
        if (line_no == 1) {
            detail::check_format(j, "aggdet-detections", kDetectionsVersion, where);
            out.config = detail::json_get<ojson>(j, "config", where);
            out.score_stream = detail::json_get<std::string>(j, "score_stream", where);
            out.with_proposals = detail::json_get<bool>(j, "with_proposals", where);
            out.labels = catalog_from_json(detail::json_get<ojson>(j, "classes", where), false, where);
            continue;
        }
        ImageResult r;
        r.image_id = detail::json_get<std::string>(j, "image_id", where);
        for (const auto& d : detail::json_get<ojson>(j, "detections", where)) {
            r.detections.push_back(detection_from_json(d, where));
        }
        if (auto it = j.find("proposals"); it != j.end()) {
            for (const auto& p : *it) {
                if (!p.is_array() || p.size() != 5) throw FormatError(where + ": proposal must be [x1,y1,x2,y2,score]");
                ojson box = ojson::array({p[0], p[1], p[2], p[3]});
                r.proposals.push_back({detail::box_from_json(box, where), p[4].get<double>()});
            }
        }
        out.images.push_back(std::move(r));
    }
    if (line_no == 0) throw FormatError(path + ": empty detections file");
    return out;
}

// ---------------------------------------------------------------------------
// Prototype bank (JSON)

inline constexpr double kBankMeanTolerance = 1e-9;

inline ojson bank_json(const PrototypeBank& bank, const ClassCatalog& catalog) {
    ojson j;
    j["format"] = "aggdet-bank";
    j["version"] = kBankVersion;
    j["dim"] = bank.dim;
    j["strategy"] = {{"kind", bank.strategy.name()}, {"count", bank.strategy.count}, {"seed", bank.strategy.seed}};
    ojson classes = ojson::array();
    for (const auto& e : catalog.classes()) {
        ojson c;
        c["id"] = e.id;
        c["split"] = to_string(e.split);
        const auto& src = e.split == Split::base ? bank.base_prototypes : bank.novel_prototypes;
        auto it = src.find(e.id);
        if (it == src.end()) throw ContractError("bank has no prototype for class " + std::to_string(e.id));
        c["prototype"] = it->second;
        c["text"] = e.text;
        classes.push_back(std::move(c));
    }
    j["classes"] = std::move(classes);
    j["mean_base_prototype"] = bank.mean_base_prototype;
    j["mean_base_text"] = bank.mean_base_text;
    return j;
}

inline void save_bank(const std::string& path, const PrototypeBank& bank, const ClassCatalog& catalog) {
    detail::write_file(path, bank_json(bank, catalog).dump(1) + "\n");
}

/// Loads a bank and checks that the stored means agree with the stored base
/// prototypes and text embeddings.
inline PrototypeBank load_bank(const std::string& path) {
    const std::string where = path;
    const ojson j = detail::parse_json(detail::read_file(path), where);
    detail::check_format(j, "aggdet-bank", kBankVersion, where);
    PrototypeBank bank;
    bank.dim = detail::json_get<std::size_t>(j, "dim", where);
    const ojson& st = detail::json_get<ojson>(j, "strategy", where);
    const auto kind = detail::json_get<std::string>(st, "kind", where);
    bank.strategy.kind = kind == "topk" ? SamplingStrategy::Kind::top_k : SamplingStrategy::Kind::random_n;
    bank.strategy.count = detail::json_get<std::size_t>(st, "count", where);
    bank.strategy.seed = detail::json_get<std::uint64_t>(st, "seed", where);
    std::vector<Vector> base_p;
    std::vector<Vector> base_t;
    for (const auto& c : detail::json_get<ojson>(j, "classes", where)) {
        const int id = detail::json_get<int>(c, "id", where);
        Vector p = detail::json_vector(c, "prototype", where);
        Vector t = detail::json_vector(c, "text", where);
        if (p.size() != bank.dim || t.size() != bank.dim) {
            throw DimensionError("", where + ": class " + std::to_string(id) + " vectors do not match dim " +
                                         std::to_string(bank.dim));
        }
        Split split;
        try {
            split = parse_split(detail::json_get<std::string>(c, "split", where));
        } catch (const ContractError& e) {
            throw FormatError(where + ": " + e.what());
        }
        if (split == Split::base) {
            base_p.push_back(p);
            base_t.push_back(std::move(t));
            bank.base_prototypes.emplace(id, std::move(p));
        } else {
            bank.novel_prototypes.emplace(id, std::move(p));
        }
    }
    if (base_p.empty()) throw FormatError(where + ": bank has no base classes");
    bank.mean_base_prototype = detail::json_vector(j, "mean_base_prototype", where);
    bank.mean_base_text = detail::json_vector(j, "mean_base_text", where);
    const Vector p_mean = detail::mean_of(base_p, bank.dim);
    const Vector t_mean = detail::mean_of(base_t, bank.dim);
    if (bank.mean_base_prototype.size() != bank.dim || bank.mean_base_text.size() != bank.dim) {
        throw DimensionError("", where + ": stored means have the wrong dimension");
    }
    for (std::size_t i = 0; i < bank.dim; ++i) {
        if (std::abs(p_mean[i] - bank.mean_base_prototype[i]) > kBankMeanTolerance ||
            std::abs(t_mean[i] - bank.mean_base_text[i]) > kBankMeanTolerance) {
            throw FormatError(where + ": stored base means disagree with the stored base vectors");
        }
    }
    return bank;
}

// ---------------------------------------------------------------------------
// Reports

inline ojson histogram_json(const ScoreHistogram& h) {
    return {{"total", h.total}, {"mean", h.mean}, {"bins", h.counts}};
}

inline ojson distribution_json(const ScoreDistribution& d) {
    return {{"novel", histogram_json(d.novel)}, {"base", histogram_json(d.base)},
            {"mean_gap", d.base.mean - d.novel.mean}};
}

inline ojson eval_json(const EvalReport& r, const ojson& config = nullptr) {
    ojson j;
    j["format"] = "aggdet-eval";
    j["version"] = kEvalVersion;
    j["config"] = config;
    j["score_stream"] = r.score_stream;
    j["images"] = r.images;
    j["detections"] = r.detections;
    j["map50"] = {{"novel", r.map_novel}, {"base", r.map_base}, {"all", r.map_all}};
    if (r.recall) {
        j["max_recall"] = {{"novel", r.recall->novel}, {"base", r.recall->base}, {"all", r.recall->all}};
    } else {
        j["max_recall"] = nullptr;
    }
    ojson per = ojson::array();
    for (const auto& c : r.per_class) {
        per.push_back({{"class_id", c.class_id}, {"split", to_string(c.split)}, {"num_gt", c.num_gt},
                       {"num_detections", c.num_detections}, {"ap50", c.ap50}});
    }
    j["per_class"] = std::move(per);
    j["score_distribution"] = {{"all", distribution_json(r.all_scores)},
                               {"true_positive", distribution_json(r.true_positive_scores)}};
    return j;
}

inline ojson load_eval_json(const std::string& path) {
    const ojson j = detail::parse_json(detail::read_file(path), path);
    detail::check_format(j, "aggdet-eval", kEvalVersion, path);
    return j;
}

/// Paired comparison of two eval reports: `after - before` for every headline
/// metric and per-class AP, plus both score distributions side by side.
inline ojson eval_diff_json(const ojson& before, const ojson& after) {
    auto delta = [](const ojson& a, const ojson& b) -> ojson {
        if (a.is_null() || b.is_null()) return nullptr;
        return b.get<double>() - a.get<double>();
    };
    ojson j;
    j["format"] = "aggdet-eval-diff";
    j["version"] = kEvalVersion;
    ojson map;
    for (const char* k : {"novel", "base", "all"}) {
        map[k] = {{"before", before["map50"][k]}, {"after", after["map50"][k]},
                  {"delta", delta(before["map50"][k], after["map50"][k])}};
    }
    j["map50"] = std::move(map);
    ojson rec;
    for (const char* k : {"novel", "base", "all"}) {
        const ojson a = before["max_recall"].is_null() ? ojson(nullptr) : before["max_recall"][k];
        const ojson b = after["max_recall"].is_null() ? ojson(nullptr) : after["max_recall"][k];
        rec[k] = {{"before", a}, {"after", b}, {"delta", delta(a, b)}};
    }
    j["max_recall"] = std::move(rec);
    ojson per = ojson::array();
    std::map<int, const ojson*> after_by_id;
    for (const auto& c : after["per_class"]) after_by_id[c["class_id"].get<int>()] = &c;
    for (const auto& c : before["per_class"]) {
        const int id = c["class_id"].get<int>();
        auto it = after_by_id.find(id);
        if (it == after_by_id.end()) continue;
        per.push_back({{"class_id", id}, {"split", c["split"]}, {"before", c["ap50"]}, {"after", (*it->second)["ap50"]},
                       {"delta", delta(c["ap50"], (*it->second)["ap50"])}});
    }
    j["per_class"] = std::move(per);
    j["score_distribution"] = {{"before", before["score_distribution"]}, {"after", after["score_distribution"]}};
    return j;
}

inline ojson ablation_json(const std::vector<AblationRow>& rows, const PipelineConfig& config) {
    ojson j;
    j["format"] = "aggdet-ablation";
    j["version"] = kEvalVersion;
    j["config"] = config_json(config);
    ojson arr = ojson::array();
    for (const auto& r : rows) {
        ojson row;
        row["arp_lq"] = r.switches.arp_lq;
        row["aoc_vs"] = r.switches.aoc_vs;
        row["aoc_lq"] = r.switches.aoc_lq;
        row["map50"] = {{"novel", r.report.map_novel}, {"base", r.report.map_base}, {"all", r.report.map_all}};
        if (r.report.recall) {
            row["max_recall"] = {{"novel", r.report.recall->novel}, {"all", r.report.recall->all}};
        }
        arr.push_back(std::move(row));
    }
    j["rows"] = std::move(arr);
    return j;
}

inline ojson latency_json(const LatencySummary& s) {
    ojson j;
    j["images"] = s.images;
    j["repetitions"] = s.repetitions;
    j["median_added_ms"] = s.median_added_ms;
    j["p95_added_ms"] = s.p95_added_ms;
    j["median_aggregation_ms"] = s.median_aggregation_ms;
    j["p95_aggregation_ms"] = s.p95_aggregation_ms;
    j["median_baseline_ms"] = s.median_baseline_ms;
    j["median_aggregated_ms"] = s.median_aggregated_ms;
    j["repetition_medians_ms"] = s.repetition_medians_ms;
    return j;
}

// ---------------------------------------------------------------------------
// Scene spec (JSON)

inline ojson scene_spec_json(const SceneSpec& s) {
    auto beta = [](const BetaShape& b) { return ojson{{"mean", b.mean}, {"concentration", b.concentration}}; };
    ojson j;
    j["seed"] = s.seed;
    j["image_width"] = s.image_width;
    j["image_height"] = s.image_height;
    j["objects_min"] = s.objects_min;
    j["objects_max"] = s.objects_max;
    j["proposals_per_object"] = s.proposals_per_object;
    j["clutter_proposals"] = s.clutter_proposals;
    j["box_jitter"] = s.box_jitter;
    j["refine_shrink"] = s.refine_shrink;
    j["refine_jitter"] = s.refine_jitter;
    j["dim"] = s.dim;
    j["base_classes"] = s.base_classes;
    j["novel_classes"] = s.novel_classes;
    j["base_objectness"] = beta(s.base_objectness);
    j["novel_objectness"] = beta(s.novel_objectness);
    j["clutter_objectness"] = beta(s.clutter_objectness);
    j["proposal_concentration"] = s.proposal_concentration;
    j["similarity_suppression"] = s.similarity_suppression;
    j["suppression_spread"] = s.suppression_spread;
    j["temperature"] = s.temperature;
    j["logit_bias"] = s.logit_bias;
    j["novel_alignment"] = s.novel_alignment;
    j["alignment_noise"] = s.alignment_noise;
    j["base_alignment_noise"] = s.base_alignment_noise;
    j["feature_noise"] = s.feature_noise;
    j["modality_gap"] = s.modality_gap;
    return j;
}

/// Overlays keys of `j` onto `s`; unknown keys are rejected.
inline void apply_scene_spec_json(const ojson& j, SceneSpec& s) {
    if (!j.is_object()) throw UsageError("scene spec must be a JSON object");
    auto beta = [](const ojson& v, BetaShape& b) {
        b.mean = v.value("mean", b.mean);
        b.concentration = v.value("concentration", b.concentration);
    };
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        const ojson& v = it.value();
        try {
            if (k == "seed") s.seed = v.get<std::uint64_t>();
            else if (k == "image_width") s.image_width = v.get<double>();
            else if (k == "image_height") s.image_height = v.get<double>();
            else if (k == "objects_min") s.objects_min = v.get<std::size_t>();
            else if (k == "objects_max") s.objects_max = v.get<std::size_t>();
            else if (k == "proposals_per_object") s.proposals_per_object = v.get<std::size_t>();
            else if (k == "clutter_proposals") s.clutter_proposals = v.get<std::size_t>();
            else if (k == "box_jitter") s.box_jitter = v.get<double>();
            else if (k == "refine_shrink") s.refine_shrink = v.get<double>();
            else if (k == "refine_jitter") s.refine_jitter = v.get<double>();
            else if (k == "dim") s.dim = v.get<std::size_t>();
            else if (k == "base_classes") s.base_classes = v.get<std::size_t>();
            else if (k == "novel_classes") s.novel_classes = v.get<std::size_t>();
            else if (k == "base_objectness") beta(v, s.base_objectness);
            else if (k == "novel_objectness") beta(v, s.novel_objectness);
            else if (k == "clutter_objectness") beta(v, s.clutter_objectness);
            else if (k == "proposal_concentration") s.proposal_concentration = v.get<double>();
            else if (k == "similarity_suppression") s.similarity_suppression = v.get<double>();
            else if (k == "suppression_spread") s.suppression_spread = v.get<double>();
            else if (k == "temperature") s.temperature = v.get<double>();
            else if (k == "logit_bias") s.logit_bias = v.get<double>();
            else if (k == "novel_alignment") s.novel_alignment = v.get<double>();
            else if (k == "alignment_noise") s.alignment_noise = v.get<double>();
            else if (k == "base_alignment_noise") s.base_alignment_noise = v.get<double>();
            else if (k == "feature_noise") s.feature_noise = v.get<double>();
            else if (k == "modality_gap") s.modality_gap = v.get<double>();
            else throw UsageError("unknown scene spec key '" + k + "'");
        } catch (const nlohmann::json::exception&) {
            throw UsageError("scene spec key '" + k + "' has the wrong type");
        }
    }
}

}  // namespace aggdet
