#include "coot/data.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

namespace coot {

using nlohmann::json;

namespace {

// RNG stream tags.
constexpr std::uint64_t kStreamGlobal = 0x01;
constexpr std::uint64_t kStreamTopics = 0x02;
constexpr std::uint64_t kStreamFeatures = 0x03;
constexpr std::uint64_t kStreamNoise = 0x04;
constexpr std::uint64_t kStreamFrames = 0x05;
constexpr std::uint64_t kStreamFeatNoise = 0x06;

} // namespace

const SampleMeta& Dataset::by_id(std::uint64_t id) const {
    auto it = index_.find(id);
    COOT_CHECK(it != index_.end(), "dataset: missing id ", id);
    return samples[it->second];
}

void Dataset::reindex() {
    index_.clear();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        COOT_CHECK(index_.emplace(samples[i].id, i).second,
                   "dataset: duplicate id ", samples[i].id);
    }
}

void SynthConfig::validate() const {
    COOT_CHECK_CFG(n_pairs >= 1, "synth: n_pairs must be >= 1");
    COOT_CHECK_CFG(clips_min >= 1 && clips_max >= clips_min,
                   "synth: bad clips range");
    COOT_CHECK_CFG(frames_min >= 1 && frames_max >= frames_min,
                   "synth: bad frames range");
    COOT_CHECK_CFG(tokens_min >= 1 && tokens_max >= tokens_min,
                   "synth: bad tokens range");
    COOT_CHECK_CFG(n_topics >= 2, "synth: n_topics must be >= 2");
    COOT_CHECK_CFG(latent_dim >= 1, "synth: latent_dim must be >= 1");
    COOT_CHECK_CFG(sigma >= 0.0f, "synth: sigma must be >= 0");
    COOT_CHECK_CFG(distractor_rate >= 0.0f && distractor_rate < 1.0f,
                   "synth: distractor_rate must be in [0, 1)");
    COOT_CHECK_CFG(video_dim >= 1 && text_dim >= 1, "synth: bad feature dims");
}

SynthResult generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    SynthResult out;
    Dataset& ds = out.dataset;
    SynthTruth& truth = out.truth;
    ds.video_dim = cfg.video_dim;
    ds.text_dim = cfg.text_dim;

    const int L = cfg.latent_dim;
    const int bg_topic = cfg.n_topics;  // extra background topic for distractors
    Rng rng_g = Rng::derive(cfg.seed, kStreamGlobal);

    truth.topic_latents = Tensor(std::size_t(cfg.n_topics) + 1, std::size_t(L));
    const float latent_scale = 1.0f / std::sqrt(float(L));
    for (std::size_t i = 0; i < truth.topic_latents.size(); ++i)
        truth.topic_latents[i] = float(rng_g.gaussian()) * latent_scale;

    // Fixed random linear maps from the shared latent to each modality.
    Tensor video_map(std::size_t(L), std::size_t(cfg.video_dim));
    Tensor text_map(std::size_t(L), std::size_t(cfg.text_dim));
    const float map_scale = 1.0f / std::sqrt(float(L));
    for (std::size_t i = 0; i < video_map.size(); ++i)
        video_map[i] = float(rng_g.gaussian()) * map_scale;
    for (std::size_t i = 0; i < text_map.size(); ++i)
        text_map[i] = float(rng_g.gaussian()) * map_scale;

    // Unique topic set per pair; pairs whose topic content collides (even as
    // a permutation or with repeats) would be indistinguishable to retrieval.
    // Pairs come in sibling groups of four: each sibling replaces one topic
    // of the group's base sequence, so telling siblings apart requires a
    // clean embedding of the one clip that differs.
    constexpr int kSiblingGroup = 4;
    std::set<std::set<int>> seen;
    truth.pair_topics.resize(std::size_t(cfg.n_pairs));
    std::vector<int> group_base;
    for (int k = 0; k < cfg.n_pairs; ++k) {
        Rng rng_t = Rng::derive(cfg.seed, kStreamTopics, std::uint64_t(k));
        const int sibling = k % kSiblingGroup;
        std::vector<int> topics;
        for (int attempt = 0; attempt < 10000; ++attempt) {
            if (sibling == 0 || group_base.empty()) {
                int n = int(rng_t.uniform_int(cfg.clips_min, cfg.clips_max));
                topics.assign(std::size_t(n), 0);
                for (auto& tpc : topics)
                    tpc = int(rng_t.uniform_int(0, cfg.n_topics - 1));
            } else {
                topics = group_base;
                std::size_t pos = std::size_t(sibling - 1) % topics.size();
                topics[pos] = int(rng_t.uniform_int(0, cfg.n_topics - 1));
            }
            if (seen.insert(std::set<int>(topics.begin(), topics.end())).second)
                break;
            topics.clear();
        }
        COOT_CHECK(!topics.empty(),
                   "synth: could not draw a unique topic set; "
                   "increase n_topics or clips range");
        if (sibling == 0) group_base = topics;
        truth.pair_topics[std::size_t(k)] = std::move(topics);
    }

    // Distractor frames carry the shared background signature plus a
    // per-segment latent offset: the background of a segment is consistent
    // within it but differs across segments and modalities, so averaging it
    // in corrupts the segment embedding while selective pooling can drop it.
    std::vector<float> latent(static_cast<std::size_t>(L), 0.0f);
    std::vector<float> bg_offset(static_cast<std::size_t>(L), 0.0f);
    auto draw_bg_offset = [&](Rng& rng) {
        for (int l = 0; l < L; ++l)
            bg_offset[std::size_t(l)] =
                float(rng.gaussian()) * 1.5f * latent_scale;
    };
    auto emit = [&](std::vector<float>& blob, const Tensor& map, int topic,
                    float sigma, Rng& rng) {
        for (int l = 0; l < L; ++l)
            latent[std::size_t(l)] =
                truth.topic_latents.at(std::size_t(topic), std::size_t(l));
        if (topic == bg_topic)
            for (int l = 0; l < L; ++l)
                latent[std::size_t(l)] += bg_offset[std::size_t(l)];
        const std::size_t dim = map.cols();
        for (std::size_t c = 0; c < dim; ++c) {
            float v = 0.0f;
            for (int l = 0; l < L; ++l)
                v += latent[std::size_t(l)] * map.at(std::size_t(l), c);
            if (sigma > 0.0f) v += sigma * float(rng.gaussian());
            blob.push_back(v);
        }
    };

    truth.frame_topics.resize(std::size_t(cfg.n_pairs));
    truth.token_topics.resize(std::size_t(cfg.n_pairs));
    for (int k = 0; k < cfg.n_pairs; ++k) {
        Rng rng_f = Rng::derive(cfg.seed, kStreamFeatures, std::uint64_t(k));
        Rng rng_n = Rng::derive(cfg.seed, kStreamNoise, std::uint64_t(k));
        SampleMeta meta;
        meta.id = std::uint64_t(k);
        meta.video_offset = ds.video_blob.size();
        meta.text_offset = ds.text_blob.size();
        const auto& topics = truth.pair_topics[std::size_t(k)];

        // Distractor share per segment: uniform in [0, 2 * rate], so the
        // background fraction itself varies between a clip and its sentence.
        // Uniform pooling inherits that variation; selective pooling can
        // drop the background rows and stay stable.
        auto segment_topics = [&](int tpc, std::int64_t len, Rng& rng) {
            std::vector<int> out(std::size_t(len), tpc);
            double share =
                std::min(rng.uniform(0.0, 2.0 * double(cfg.distractor_rate)), 0.8);
            std::int64_t n_bg = std::int64_t(share * double(len - 1) + 0.5);
            if (n_bg > 0) {
                std::vector<std::int64_t> pos;
                for (std::int64_t f = 1; f < len; ++f) pos.push_back(f);
                rng.shuffle(pos);
                for (std::int64_t i = 0; i < n_bg; ++i)
                    out[std::size_t(pos[std::size_t(i)])] = bg_topic;
            }
            return out;
        };

        std::int64_t frame_off = 0;
        for (int tpc : topics) {
            std::int64_t len = rng_f.uniform_int(cfg.frames_min, cfg.frames_max);
            meta.clips.push_back({frame_off, frame_off + len});
            draw_bg_offset(rng_n);
            for (int topic : segment_topics(tpc, len, rng_f)) {
                truth.frame_topics[std::size_t(k)].push_back(topic);
                emit(ds.video_blob, video_map, topic, cfg.sigma, rng_n);
            }
            frame_off += len;
        }
        meta.n_frames = frame_off;

        std::int64_t token_off = 0;
        for (int tpc : topics) {
            std::int64_t len = rng_f.uniform_int(cfg.tokens_min, cfg.tokens_max);
            meta.sentences.push_back({token_off, token_off + len});
            draw_bg_offset(rng_n);
            for (int topic : segment_topics(tpc, len, rng_f)) {
                truth.token_topics[std::size_t(k)].push_back(topic);
                emit(ds.text_blob, text_map, topic, cfg.sigma, rng_n);
            }
            token_off += len;
        }
        meta.n_tokens = token_off;
        ds.samples.push_back(std::move(meta));
    }
    ds.reindex();
    return out;
}

namespace {

std::string blob_to_bytes(const std::vector<float>& blob) {
    std::string bytes(blob.size() * 4, '\0');
    for (std::size_t i = 0; i < blob.size(); ++i) {
        std::uint32_t v = 0;
        std::memcpy(&v, &blob[i], 4);
        for (int b = 0; b < 4; ++b)
            bytes[i * 4 + std::size_t(b)] = char((v >> (8 * b)) & 0xFF);
    }
    return bytes;
}

std::vector<float> bytes_to_blob(const std::string& bytes) {
    COOT_CHECK(bytes.size() % 4 == 0, "blob: size not a multiple of 4");
    std::vector<float> blob(bytes.size() / 4);
    for (std::size_t i = 0; i < blob.size(); ++i) {
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b)
            v |= std::uint32_t(std::uint8_t(bytes[i * 4 + std::size_t(b)]))
                 << (8 * b);
        std::memcpy(&blob[i], &v, 4);
    }
    return blob;
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    COOT_CHECK(f.good(), "cannot open ", path, " for writing");
    f.write(bytes.data(), std::streamsize(bytes.size()));
    COOT_CHECK(f.good(), "write failed for ", path);
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    COOT_CHECK(f.good(), "cannot open ", path);
    return std::string((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
}

json ranges_to_json(const std::vector<ClipRange>& ranges) {
    json arr = json::array();
    for (const auto& r : ranges) arr.push_back({r.start, r.end});
    return arr;
}

std::vector<ClipRange> ranges_from_json(const json& arr) {
    std::vector<ClipRange> out;
    for (const auto& r : arr) {
        COOT_CHECK(r.is_array() && r.size() == 2, "manifest: bad range entry");
        out.push_back({r[0].get<std::int64_t>(), r[1].get<std::int64_t>()});
    }
    return out;
}

} // namespace

void write_dataset(const std::string& prefix, const Dataset& ds,
                   bool overwrite) {
    const std::string manifest_path = prefix + ".manifest.json";
    if (!overwrite)
        COOT_CHECK(!std::filesystem::exists(manifest_path),
                   "refusing to overwrite ", manifest_path,
                   " (use --force to allow)");
    json samples = json::array();
    for (const auto& s : ds.samples) {
        samples.push_back({{"id", s.id},
                           {"clips", ranges_to_json(s.clips)},
                           {"sentences", ranges_to_json(s.sentences)},
                           {"video_offset", s.video_offset},
                           {"text_offset", s.text_offset}});
    }
    json manifest = {{"version", 1},
                     {"video_dim", ds.video_dim},
                     {"text_dim", ds.text_dim},
                     {"samples", samples}};
    write_file(manifest_path, manifest.dump());
    write_file(prefix + ".video.f32", blob_to_bytes(ds.video_blob));
    write_file(prefix + ".text.f32", blob_to_bytes(ds.text_blob));
}

Dataset read_dataset(const std::string& prefix) {
    Dataset ds;
    json manifest = json::parse(read_file(prefix + ".manifest.json"));
    COOT_CHECK(manifest.value("version", 0) == 1,
               "manifest: unsupported version");
    ds.video_dim = manifest.at("video_dim").get<int>();
    ds.text_dim = manifest.at("text_dim").get<int>();
    ds.video_blob = bytes_to_blob(read_file(prefix + ".video.f32"));
    ds.text_blob = bytes_to_blob(read_file(prefix + ".text.f32"));
    for (const auto& s : manifest.at("samples")) {
        SampleMeta meta;
        meta.id = s.at("id").get<std::uint64_t>();
        meta.clips = ranges_from_json(s.at("clips"));
        meta.sentences = ranges_from_json(s.at("sentences"));
        meta.video_offset = s.at("video_offset").get<std::size_t>();
        meta.text_offset = s.at("text_offset").get<std::size_t>();
        COOT_CHECK(!meta.clips.empty() && !meta.sentences.empty(),
                   "manifest: sample ", meta.id, " has no segments");
        for (const auto& r : meta.clips)
            meta.n_frames = std::max(meta.n_frames, r.end);
        for (const auto& r : meta.sentences)
            meta.n_tokens = std::max(meta.n_tokens, r.end);
        // Ranges must lie within the sample's slice of the blob.
        COOT_CHECK(meta.video_offset +
                           std::size_t(meta.n_frames) * std::size_t(ds.video_dim) <=
                       ds.video_blob.size(),
                   "manifest: video ranges exceed blob for sample ", meta.id);
        COOT_CHECK(meta.text_offset +
                           std::size_t(meta.n_tokens) * std::size_t(ds.text_dim) <=
                       ds.text_blob.size(),
                   "manifest: text ranges exceed blob for sample ", meta.id);
        for (const auto& r : meta.clips)
            COOT_CHECK(r.start >= 0 && r.start < r.end, "manifest: bad clip range");
        for (const auto& r : meta.sentences)
            COOT_CHECK(r.start >= 0 && r.start < r.end,
                       "manifest: bad sentence range");
        ds.samples.push_back(std::move(meta));
    }
    ds.reindex();
    return ds;
}

Dataset subset(const Dataset& ds, std::size_t from, std::size_t count) {
    COOT_CHECK(from + count <= ds.samples.size(), "subset: out of range");
    Dataset out;
    out.video_dim = ds.video_dim;
    out.text_dim = ds.text_dim;
    for (std::size_t i = from; i < from + count; ++i) {
        SampleMeta meta = ds.samples[i];
        const std::size_t vn =
            std::size_t(meta.n_frames) * std::size_t(ds.video_dim);
        const std::size_t tn =
            std::size_t(meta.n_tokens) * std::size_t(ds.text_dim);
        std::size_t vo = out.video_blob.size(), to = out.text_blob.size();
        out.video_blob.insert(out.video_blob.end(),
                              ds.video_blob.begin() + std::ptrdiff_t(meta.video_offset),
                              ds.video_blob.begin() +
                                  std::ptrdiff_t(meta.video_offset + vn));
        out.text_blob.insert(out.text_blob.end(),
                             ds.text_blob.begin() + std::ptrdiff_t(meta.text_offset),
                             ds.text_blob.begin() +
                                 std::ptrdiff_t(meta.text_offset + tn));
        meta.video_offset = vo;
        meta.text_offset = to;
        out.samples.push_back(std::move(meta));
    }
    out.reindex();
    return out;
}

std::vector<std::int64_t> sample_frames(const ClipRange& range,
                                        std::size_t max_count, bool train,
                                        Rng* rng) {
    COOT_CHECK(range.length() > 0, "sample_frames: empty range");
    COOT_CHECK(max_count > 0, "sample_frames: max_count must be > 0");
    const std::int64_t len = range.length();
    std::vector<std::int64_t> out;
    if (std::size_t(len) <= max_count) {
        out.reserve(std::size_t(len));
        for (std::int64_t i = range.start; i < range.end; ++i) out.push_back(i);
        return out;
    }
    COOT_CHECK(!train || rng != nullptr, "sample_frames: train mode needs rng");
    const std::int64_t n = std::int64_t(max_count);
    out.reserve(max_count);
    for (std::int64_t k = 0; k < n; ++k) {
        std::int64_t lo = range.start + k * len / n;
        std::int64_t hi = range.start + (k + 1) * len / n;  // exclusive
        if (train)
            out.push_back(rng->uniform_int(lo, hi - 1));
        else
            out.push_back((lo + hi) / 2);  // center frame, floor midpoint
    }
    return out;
}

ClipRange expand_clip(ClipRange range, std::int64_t min_len,
                      std::int64_t extent) {
    COOT_CHECK(range.start >= 0 && range.end <= extent && range.start <= range.end,
               "expand_clip: range outside extent");
    bool grow_end = true;
    while (range.length() < min_len) {
        const bool can_end = range.end < extent;
        const bool can_start = range.start > 0;
        if (!can_end && !can_start) break;
        if (grow_end ? can_end : !can_start)
            ++range.end;
        else
            --range.start;
        grow_end = !grow_end;
    }
    return range;
}

ClipRange inject_boundary_noise(ClipRange range, double p, std::int64_t extent,
                                Rng& rng, std::int64_t min_len, bool full) {
    COOT_CHECK(p >= 0.0 && p <= 1.0, "boundary noise: p must be in [0, 1]");
    if (full) {
        std::int64_t a = rng.uniform_int(0, extent);
        std::int64_t b = rng.uniform_int(0, extent);
        range.start = std::min(a, b);
        range.end = std::max(a, b);
        return expand_clip(range, min_len, extent);
    }
    if (p == 0.0) return range;
    const std::int64_t amp = std::int64_t(double(extent) * p);
    range.start += rng.uniform_int(-amp, amp);
    range.end += rng.uniform_int(-amp, amp);
    range.start = std::clamp<std::int64_t>(range.start, 0, extent);
    range.end = std::clamp<std::int64_t>(range.end, 0, extent);
    if (range.start > range.end) std::swap(range.start, range.end);
    return expand_clip(range, min_len, extent);
}

void expand_all_clips(Dataset& ds, std::int64_t min_len) {
    for (auto& s : ds.samples)
        for (auto& r : s.clips) r = expand_clip(r, min_len, s.n_frames);
}

void apply_boundary_noise(Dataset& ds, double p, bool full,
                          std::int64_t min_len, std::uint64_t seed) {
    for (auto& s : ds.samples) {
        for (std::size_t c = 0; c < s.clips.size(); ++c) {
            Rng rng = Rng::derive(seed, kStreamNoise, s.id, c);
            s.clips[c] = inject_boundary_noise(s.clips[c], p, s.n_frames, rng,
                                               min_len, full);
        }
    }
}

namespace {

FeatureSequence gather_rows(const Dataset& ds, const SampleMeta& meta,
                            const std::vector<std::int64_t>& indices,
                            bool video) {
    const int dim = video ? ds.video_dim : ds.text_dim;
    FeatureSequence seq;
    seq.features = Tensor(indices.size(), std::size_t(dim));
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const float* src = video ? ds.video_row(meta, indices[r])
                                 : ds.text_row(meta, indices[r]);
        std::copy(src, src + dim, seq.features.data() + r * std::size_t(dim));
    }
    seq.mask = Mask::all(indices.size());
    return seq;
}

} // namespace

Batch make_batch(const Dataset& ds, const std::vector<std::uint64_t>& ids,
                 const BatchConfig& cfg, std::uint64_t seed) {
    Batch batch;
    batch.samples.reserve(ids.size());
    for (std::uint64_t id : ids) {
        const SampleMeta& meta = ds.by_id(id);
        Rng frame_rng = Rng::derive(seed, kStreamFrames, id);
        HierarchicalSample hs;
        hs.id = id;
        for (const auto& clip : meta.clips) {
            auto idx = sample_frames(clip, cfg.max_frames, cfg.train, &frame_rng);
            hs.clips.push_back(gather_rows(ds, meta, idx, true));
        }
        auto vidx = sample_frames({0, meta.n_frames}, cfg.max_frames, cfg.train,
                                  &frame_rng);
        hs.video_all = gather_rows(ds, meta, vidx, true);
        for (const auto& sent : meta.sentences) {
            auto idx = sample_frames(sent, cfg.max_frames, cfg.train, &frame_rng);
            hs.sentences.push_back(gather_rows(ds, meta, idx, false));
        }
        auto tidx = sample_frames({0, meta.n_tokens}, cfg.max_frames, cfg.train,
                                  &frame_rng);
        hs.text_all = gather_rows(ds, meta, tidx, false);

        if (cfg.train && cfg.feature_noise > 0.0f) {
            Rng noise_rng = Rng::derive(seed, kStreamFeatNoise, id);
            auto perturb = [&](FeatureSequence& seq) {
                for (std::size_t i = 0; i < seq.features.size(); ++i)
                    seq.features[i] +=
                        cfg.feature_noise * float(noise_rng.gaussian());
            };
            for (auto& c : hs.clips) perturb(c);
            perturb(hs.video_all);
        }
        batch.samples.push_back(std::move(hs));
    }
    return batch;
}

} // namespace coot
