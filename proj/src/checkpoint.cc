#include "teaforn/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "teaforn/errors.h"

namespace teaforn {

namespace {

constexpr char kMagic[8] = {'T', 'F', 'N', 'C', 'K', 'P', 'T', '\0'};

class Writer {
   public:
    void bytes(const void *data, std::size_t n) { out_.append(static_cast<const char *>(data), n); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void tensor(const TensorRecord &t) {
        str(t.name);
        u32(static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) u64(d);
        for (float f : t.values) u32(std::bit_cast<std::uint32_t>(f));
    }
    std::string take() { return std::move(out_); }

   private:
    std::string out_;
};

class Reader {
   public:
    explicit Reader(std::string_view in) : in_(in) {}
    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) throw IncompatibleCheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(in_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    TensorRecord tensor() {
        TensorRecord t;
        t.name = str();
        const std::uint32_t rank = u32();
        if (rank > 8) throw IncompatibleCheckpointError("tensor " + t.name + " has rank " + std::to_string(rank));
        std::size_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            t.shape.push_back(u64());
            count *= t.shape.back();
        }
        need(count * 4);
        t.values.resize(count);
        for (auto &f : t.values) f = std::bit_cast<float>(u32());
        return t;
    }
    std::string_view raw(std::size_t n) {
        need(n);
        auto s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == in_.size(); }

   private:
    std::string_view in_;
    std::size_t pos_ = 0;
};

}  // namespace

const TensorRecord *Checkpoint::find(std::string_view name) const {
    for (const auto &t : parameters)
        if (t.name == name) return &t;
    return nullptr;
}

std::vector<TensorRecord> snapshot_parameters(const Seq2Seq<float> &model) {
    std::vector<TensorRecord> out;
    for (const auto &[name, t] : model.parameters())
        out.push_back({name, t.shape(), std::vector<float>(t.values().begin(), t.values().end())});
    return out;
}

void restore_parameters(Seq2Seq<float> &model, std::span<const TensorRecord> records) {
    auto params = model.parameters();
    if (params.size() != records.size())
        throw IncompatibleCheckpointError("checkpoint holds " + std::to_string(records.size()) +
                                          " tensors, model has " + std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto &[name, t] = params[i];
        if (records[i].name != name || records[i].shape != t.shape())
            throw IncompatibleCheckpointError("checkpoint tensor " + records[i].name + " " +
                                              shape_string(records[i].shape) + " does not match model tensor " +
                                              name + " " + shape_string(t.shape()));
        std::copy(records[i].values.begin(), records[i].values.end(), t.mutable_values().begin());
    }
}

std::vector<TensorRecord> snapshot_optimizer(const Adam &adam, const Seq2Seq<float> &model) {
    std::vector<TensorRecord> out;
    const auto params = model.parameters();
    const auto &m = adam.first_moments();
    const auto &v = adam.second_moments();
    if (m.empty()) return out;
    for (std::size_t i = 0; i < params.size(); ++i) out.push_back({params[i].first + ".m", params[i].second.shape(), m[i]});
    for (std::size_t i = 0; i < params.size(); ++i) out.push_back({params[i].first + ".v", params[i].second.shape(), v[i]});
    return out;
}

void restore_optimizer(Adam &adam, std::uint64_t steps, std::span<const TensorRecord> records,
                       const Seq2Seq<float> &model) {
    const auto params = model.parameters();
    if (records.empty()) {
        adam.restore(steps, {}, {});
        return;
    }
    if (records.size() != 2 * params.size())
        throw IncompatibleCheckpointError("optimizer state holds " + std::to_string(records.size()) + " tensors for " +
                                          std::to_string(params.size()) + " parameters");
    std::vector<std::vector<float>> m, v;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto &rm = records[i], &rv = records[params.size() + i];
        if (rm.name != params[i].first + ".m" || rv.name != params[i].first + ".v" ||
            rm.values.size() != params[i].second.numel() || rv.values.size() != params[i].second.numel())
            throw IncompatibleCheckpointError("optimizer state does not match parameter " + params[i].first);
        m.push_back(rm.values);
        v.push_back(rv.values);
    }
    adam.restore(steps, std::move(m), std::move(v));
}

std::string serialize_checkpoint(const Checkpoint &c) {
    Writer w;
    w.bytes(kMagic, sizeof kMagic);
    w.u32(c.version);
    w.u32(static_cast<std::uint32_t>(c.config.size()));
    for (const auto &[k, v] : c.config) {
        w.str(k);
        w.str(v);
    }
    w.u64(c.step);
    w.str(c.rng_state);
    w.u32(static_cast<std::uint32_t>(c.parameters.size()));
    for (const auto &t : c.parameters) w.tensor(t);
    w.u64(c.optimizer_steps);
    w.u32(static_cast<std::uint32_t>(c.optimizer_state.size()));
    for (const auto &t : c.optimizer_state) w.tensor(t);
    return w.take();
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
    Reader r(bytes);
    if (std::memcmp(r.raw(sizeof kMagic).data(), kMagic, sizeof kMagic) != 0)
        throw IncompatibleCheckpointError("not a checkpoint (bad magic)");
    Checkpoint c;
    c.version = r.u32();
    if (c.version != kCheckpointVersion)
        throw IncompatibleCheckpointError("unsupported checkpoint version " + std::to_string(c.version));
    const std::uint32_t n_config = r.u32();
    for (std::uint32_t i = 0; i < n_config; ++i) {
        auto k = r.str();
        c.config[k] = r.str();
    }
    c.step = r.u64();
    c.rng_state = r.str();
    const std::uint32_t n_params = r.u32();
    for (std::uint32_t i = 0; i < n_params; ++i) {
        c.parameters.push_back(r.tensor());
        for (std::uint32_t j = 0; j < i; ++j)
            if (c.parameters[j].name == c.parameters[i].name)
                throw IncompatibleCheckpointError("duplicate tensor name " + c.parameters[i].name);
    }
    c.optimizer_steps = r.u64();
    const std::uint32_t n_opt = r.u32();
    for (std::uint32_t i = 0; i < n_opt; ++i) c.optimizer_state.push_back(r.tensor());
    if (!r.done()) throw IncompatibleCheckpointError("trailing bytes after checkpoint");
    return c;
}

void save_checkpoint(const std::filesystem::path &path, const Checkpoint &checkpoint) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp);
        const auto bytes = serialize_checkpoint(checkpoint);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return deserialize_checkpoint(buffer.str());
}

Checkpoint average_checkpoints(std::span<const Checkpoint> trail, std::size_t last_m) {
    if (last_m < 1) throw ParameterError("average_checkpoints: last_m must be at least 1");
    if (trail.size() < last_m)
        throw ParameterError("average_checkpoints: trail has " + std::to_string(trail.size()) + " checkpoints, need " +
                             std::to_string(last_m));
    const auto selected = trail.subspan(trail.size() - last_m);
    const Checkpoint &newest = selected.back();
    Checkpoint out;
    out.version = newest.version;
    out.config = newest.config;
    out.step = newest.step;
    out.rng_state = newest.rng_state;
    for (std::size_t i = 0; i < newest.parameters.size(); ++i) {
        const auto &ref = newest.parameters[i];
        std::vector<double> acc(ref.values.size(), 0.0);
        for (const auto &c : selected) {
            if (c.parameters.size() != newest.parameters.size())
                throw IncompatibleCheckpointError("checkpoints hold different tensor tables");
            const auto &t = c.parameters[i];
            if (t.name != ref.name || t.shape != ref.shape)
                throw IncompatibleCheckpointError("tensor " + t.name + " " + shape_string(t.shape) +
                                                  " does not match " + ref.name + " " + shape_string(ref.shape));
            for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += t.values[j];
        }
        TensorRecord mean{ref.name, ref.shape, std::vector<float>(acc.size())};
        for (std::size_t j = 0; j < acc.size(); ++j) mean.values[j] = static_cast<float>(acc[j] / static_cast<double>(last_m));
        out.parameters.push_back(std::move(mean));
    }
    return out;
}

}  // namespace teaforn
