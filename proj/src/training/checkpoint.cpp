#include "d2pcca/training/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

#include "d2pcca/errors.hpp"

namespace d2pcca::training {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'D', '2', 'P', 'C', 'C', 'A', 'C', 'K'};

void put_u64(std::string& out, std::uint64_t v) {
    for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}

class Reader {
public:
    Reader(const std::string& bytes, const fs::path& path) : bytes_(bytes), path_(path) {}

    std::uint64_t u64() { return read_uint(8); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(read_uint(4)); }
    double f64() { return std::bit_cast<double>(u64()); }

    std::string bytes(std::uint64_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::uint64_t n) const {
        if (n > bytes_.size() - pos_) throw IoError("checkpoint " + path_.string() + " is truncated");
    }

    std::uint64_t read_uint(int width) {
        need(static_cast<std::uint64_t>(width));
        std::uint64_t v = 0;
        for (int k = 0; k < width; ++k)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + k])) << (8 * k);
        pos_ += static_cast<std::size_t>(width);
        return v;
    }

    const std::string& bytes_;
    const fs::path& path_;
    std::size_t pos_ = 0;
};

// JSON has no NaN or infinities; they round-trip through null.
json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double number_from(const json& j, double if_null) { return j.is_null() ? if_null : j.get<double>(); }

}  // namespace

const Tensor& Archive::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw IoError("checkpoint has no tensor named '" + name + "'");
}

bool Archive::has(const std::string& name) const {
    for (const auto& entry : tensors)
        if (entry.first == name) return true;
    return false;
}

void write_archive(const fs::path& path, const Archive& archive) {
    std::string out(kMagic, sizeof(kMagic));
    put_u32(out, kArchiveVersion);
    const std::string header = archive.header.dump();
    put_u64(out, header.size());
    out += header;
    put_u64(out, archive.tensors.size());
    for (const auto& [name, t] : archive.tensors) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) put_u64(out, d);
        for (double v : t.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw IoError("failed writing " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

Archive read_archive(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint " + path.string());
    const std::string bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
    Reader r(bytes, path);
    if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
        throw IoError(path.string() + " is not a checkpoint file");
    const std::uint32_t version = r.u32();
    if (version != kArchiveVersion)
        throw IoError("checkpoint " + path.string() + " has unsupported version " + std::to_string(version));
    Archive a;
    try {
        a.header = json::parse(r.bytes(r.u64()));
    } catch (const json::parse_error& e) {
        throw IoError("checkpoint " + path.string() + " has a corrupt header: " + e.what());
    }
    const std::uint64_t count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = r.bytes(r.u32());
        diff::Shape shape(r.u32());
        for (auto& d : shape) d = r.u64();
        Tensor t(shape);
        for (double& v : t.values()) v = r.f64();
        a.tensors.emplace_back(std::move(name), std::move(t));
    }
    if (!r.done()) throw IoError("checkpoint " + path.string() + " has trailing bytes");
    return a;
}

json spec_to_json(const model::ModelSpec& spec) {
    return {{"shared_dim", spec.layout.shared_dim},
            {"set_dims", spec.layout.set_dims},
            {"obs_dims", spec.obs_dims},
            {"gate", nets::to_string(spec.gate)},
            {"encoder_hidden", spec.encoder_hidden},
            {"flow_layers", spec.flow_layers},
            {"flow_hidden", spec.flow_hidden}};
}

model::ModelSpec spec_from_json(const json& j) {
    try {
        model::ModelSpec s;
        s.layout.shared_dim = j.at("shared_dim").get<std::size_t>();
        s.layout.set_dims = j.at("set_dims").get<std::vector<std::size_t>>();
        s.obs_dims = j.at("obs_dims").get<std::vector<std::size_t>>();
        s.gate = nets::gate_variant_from_string(j.at("gate").get<std::string>());
        s.encoder_hidden = j.at("encoder_hidden").get<std::size_t>();
        s.flow_layers = j.at("flow_layers").get<std::size_t>();
        s.flow_hidden = j.at("flow_hidden").get<std::size_t>();
        s.validate();
        return s;
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed model description: ") + e.what());
    }
}

void save_checkpoint(const fs::path& path, const model::D2pccaModel& model, const ClippedAdam* optimizer,
                     const CheckpointMeta& meta) {
    Archive a;
    json trace = json::array();
    for (const EpochMetrics& m : meta.trace)
        trace.push_back({{"epoch", m.epoch},
                         {"beta", m.beta},
                         {"train_elbo_per_step", number_or_null(m.train_elbo_per_step)},
                         {"val_elbo_per_step", number_or_null(m.val_elbo_per_step)}});
    a.header = {{"kind", "d2pcca"},
                {"model", spec_to_json(model.spec)},
                {"variant", meta.variant},
                {"seed", meta.seed},
                {"epoch", meta.epoch},
                {"best_val", number_or_null(meta.best_val)},
                {"trace", trace},
                {"config", meta.config},
                {"optimizer_steps", optimizer ? optimizer->steps() : 0},
                {"has_optimizer", optimizer != nullptr}};
    for (const Parameter* p : model.parameters()) a.tensors.emplace_back(p->name, p->value);
    if (optimizer) {
        const auto& params = optimizer->parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            a.tensors.emplace_back("adam.m/" + params[i]->name, optimizer->first_moments()[i]);
            a.tensors.emplace_back("adam.v/" + params[i]->name, optimizer->second_moments()[i]);
        }
    }
    write_archive(path, a);
}

void assign_parameters(model::D2pccaModel& model, const Archive& archive) {
    for (Parameter* p : model.parameters()) {
        const Tensor& t = archive.tensor(p->name);
        if (t.shape() != p->value.shape())
            throw IoError("checkpoint tensor '" + p->name + "' has shape " + diff::to_string(t.shape()) +
                          ", model expects " + diff::to_string(p->value.shape()));
        p->value = t;
    }
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
    const Archive a = read_archive(path);
    if (a.header.value("kind", "") != "d2pcca")
        throw IoError("checkpoint " + path.string() + " does not hold a deep model");
    try {
        std::mt19937_64 unused(0);
        LoadedCheckpoint out{model::make_model(spec_from_json(a.header.at("model")), unused), {}, false, 0, {}, {}};
        assign_parameters(out.model, a);
        CheckpointMeta& meta = out.meta;
        meta.variant = a.header.at("variant").get<std::string>();
        meta.seed = a.header.at("seed").get<std::uint64_t>();
        meta.epoch = a.header.at("epoch").get<std::size_t>();
        meta.best_val = number_from(a.header.at("best_val"), -std::numeric_limits<double>::infinity());
        meta.config = a.header.at("config");
        for (const json& row : a.header.at("trace")) {
            EpochMetrics m;
            m.epoch = row.at("epoch").get<std::size_t>();
            m.beta = row.at("beta").get<double>();
            m.train_elbo_per_step = number_from(row.at("train_elbo_per_step"), std::nan(""));
            m.val_elbo_per_step = number_from(row.at("val_elbo_per_step"), std::nan(""));
            m.wall_seconds = std::nan("");
            meta.trace.push_back(m);
        }
        out.has_optimizer = a.header.at("has_optimizer").get<bool>();
        if (out.has_optimizer) {
            out.adam_steps = a.header.at("optimizer_steps").get<std::uint64_t>();
            for (const Parameter* p : out.model.parameters()) {
                out.adam_m.push_back(a.tensor("adam.m/" + p->name));
                out.adam_v.push_back(a.tensor("adam.v/" + p->name));
            }
        }
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint " + path.string() + " has a malformed header: " + e.what());
    }
}

void dump_weights_json(const fs::path& path, const model::D2pccaModel& model) {
    json j = json::object();
    for (const Parameter* p : model.parameters())
        j[p->name] = {{"shape", p->value.shape()},
                      {"values", std::vector<double>(p->value.values().begin(), p->value.values().end())}};
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << j.dump(1) << '\n';
    if (!f) throw IoError("failed writing " + path.string());
}

}  // namespace d2pcca::training
