#include "mteeg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "mteeg/adapters.hpp"
#include "mteeg/errors.hpp"

namespace mteeg {

namespace {

constexpr char kMagic[4] = {'M', 'T', 'E', 'E'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF64 = 0;

class Writer {
public:
    explicit Writer(std::vector<char>& buffer) : buffer_(buffer) {}

    template <typename T>
    void pod(const T& value) {
        const auto* p = reinterpret_cast<const char*>(&value);
        buffer_.insert(buffer_.end(), p, p + sizeof(T));
    }
    void bytes(const void* data, std::size_t size) {
        const auto* p = static_cast<const char*>(data);
        buffer_.insert(buffer_.end(), p, p + size);
    }
    void str(const std::string& s) {
        pod(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

private:
    std::vector<char>& buffer_;
};

class Reader {
public:
    Reader(const char* data, std::size_t size) : data_(data), size_(size) {}

    template <typename T>
    T pod(const char* what) {
        if (offset_ + sizeof(T) > size_) {
            throw FormatError(std::string("checkpoint: truncated while reading ") + what, offset_);
        }
        T value;
        std::memcpy(&value, data_ + offset_, sizeof(T));
        offset_ += sizeof(T);
        return value;
    }
    std::string str(const char* what) {
        const auto len = pod<std::uint32_t>(what);
        if (offset_ + len > size_) {
            throw FormatError(std::string("checkpoint: truncated string in ") + what, offset_);
        }
        std::string s(data_ + offset_, len);
        offset_ += len;
        return s;
    }
    std::uint64_t offset() const { return offset_; }
    std::size_t size() const { return size_; }
    const char* data() const { return data_; }

private:
    const char* data_;
    std::size_t size_;
    std::uint64_t offset_ = 0;
};

struct DirEntry {
    std::string name;
    std::uint8_t rank;
    std::vector<std::uint64_t> dims;
    std::uint64_t offset;
};

}  // namespace

void save_checkpoint(const ModelState& model, const std::string& path) {
    auto params = model.all_params();

    // header + directory first, then payload offsets fall out of the sizes
    std::vector<char> head;
    Writer w(head);
    w.bytes(kMagic, 4);
    w.pod(kVersion);
    w.pod(static_cast<std::uint8_t>(model.variant));

    w.pod(static_cast<std::uint32_t>(model.tasks.size()));
    for (const auto& t : model.tasks) {
        w.pod(static_cast<std::uint32_t>(t.id));
        w.str(t.name);
        w.pod(static_cast<std::uint32_t>(t.num_classes));
        w.pod(static_cast<std::uint8_t>(t.loss));
        w.pod(static_cast<std::uint32_t>(t.channels));
        w.pod(t.duration_seconds);
        w.pod(t.subsample_fraction);
    }

    const auto& cfg = model.config;
    w.pod(static_cast<std::uint32_t>(cfg.embed_dim));
    w.pod(static_cast<std::uint32_t>(cfg.heads));
    w.pod(static_cast<std::uint32_t>(cfg.layers));
    w.pod(static_cast<std::uint32_t>(cfg.conv_blocks));
    w.pod(static_cast<std::uint32_t>(cfg.group_norm_groups));
    w.pod(static_cast<std::uint32_t>(cfg.conv_channels));
    w.pod(static_cast<std::uint32_t>(cfg.patch_window));
    w.pod(static_cast<std::uint32_t>(cfg.max_patches));
    w.pod(static_cast<std::uint32_t>(cfg.max_channels));
    w.pod(cfg.layer_norm_eps);

    const bool has_adapters = model.adapters.has_value();
    w.pod(static_cast<std::uint8_t>(has_adapters ? 1 : 0));
    if (has_adapters) {
        w.pod(static_cast<std::uint32_t>(model.adapters->config.rank));
        w.pod(static_cast<std::uint8_t>(model.adapters->config.locations));
        w.pod(static_cast<std::uint32_t>(model.adapters->config.num_experts));
    }

    const auto& labels = model.channels.labels();
    w.pod(static_cast<std::uint32_t>(labels.size()));
    for (const auto& label : labels) {
        w.str(label);
    }

    // directory with placeholder offsets to learn its byte size
    std::vector<char> dir;
    {
        Writer d(dir);
        d.pod(static_cast<std::uint32_t>(params.size()));
        for (const auto* p : params) {
            d.str(p->name);
            d.pod(kDtypeF64);
            d.pod(static_cast<std::uint8_t>(p->value->rank()));
            for (std::int64_t dim : p->value->shape) {
                d.pod(static_cast<std::uint64_t>(dim));
            }
            d.pod(static_cast<std::uint64_t>(0));
        }
    }

    std::uint64_t payload_offset = head.size() + dir.size();
    dir.clear();
    {
        Writer d(dir);
        d.pod(static_cast<std::uint32_t>(params.size()));
        for (const auto* p : params) {
            d.str(p->name);
            d.pod(kDtypeF64);
            d.pod(static_cast<std::uint8_t>(p->value->rank()));
            for (std::int64_t dim : p->value->shape) {
                d.pod(static_cast<std::uint64_t>(dim));
            }
            d.pod(payload_offset);
            payload_offset += p->value->data.size() * sizeof(double);
        }
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FileError("cannot open for writing: " + path);
    }
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.write(dir.data(), static_cast<std::streamsize>(dir.size()));
    for (const auto* p : params) {
        out.write(reinterpret_cast<const char*>(p->value->data.data()),
                  static_cast<std::streamsize>(p->value->data.size() * sizeof(double)));
    }
    if (!out) {
        throw FileError("write failed: " + path);
    }
}

ModelState load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FileError("cannot open for reading: " + path);
    }
    std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r(blob.data(), blob.size());

    if (blob.size() < 4 || std::memcmp(blob.data(), kMagic, 4) != 0) {
        throw FormatError("checkpoint: bad magic", 0);
    }
    r.pod<std::uint32_t>("magic");  // skip the 4 magic bytes
    const auto version = r.pod<std::uint32_t>("version");
    if (version != kVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version), 4);
    }
    const auto variant = static_cast<Variant>(r.pod<std::uint8_t>("variant"));

    const auto num_tasks = r.pod<std::uint32_t>("task count");
    std::vector<TaskSpec> tasks;
    for (std::uint32_t i = 0; i < num_tasks; ++i) {
        TaskSpec t;
        t.id = r.pod<std::uint32_t>("task id");
        t.name = r.str("task name");
        t.num_classes = r.pod<std::uint32_t>("task classes");
        t.loss = static_cast<LossKind>(r.pod<std::uint8_t>("task loss"));
        t.channels = r.pod<std::uint32_t>("task channels");
        t.duration_seconds = r.pod<double>("task duration");
        t.subsample_fraction = r.pod<double>("task subsample");
        tasks.push_back(std::move(t));
    }

    BackboneConfig cfg;
    cfg.embed_dim = r.pod<std::uint32_t>("embed_dim");
    cfg.heads = r.pod<std::uint32_t>("heads");
    cfg.layers = r.pod<std::uint32_t>("layers");
    cfg.conv_blocks = r.pod<std::uint32_t>("conv_blocks");
    cfg.group_norm_groups = r.pod<std::uint32_t>("group_norm_groups");
    cfg.conv_channels = r.pod<std::uint32_t>("conv_channels");
    cfg.patch_window = r.pod<std::uint32_t>("patch_window");
    cfg.max_patches = r.pod<std::uint32_t>("max_patches");
    cfg.max_channels = r.pod<std::uint32_t>("max_channels");
    cfg.layer_norm_eps = r.pod<double>("layer_norm_eps");

    const bool has_adapters = r.pod<std::uint8_t>("adapter flag") != 0;
    AdapterConfig adapter_cfg;
    if (has_adapters) {
        adapter_cfg.variant = variant;
        adapter_cfg.rank = r.pod<std::uint32_t>("adapter rank");
        adapter_cfg.locations = static_cast<AdapterLocation>(r.pod<std::uint8_t>("locations"));
        adapter_cfg.num_experts = r.pod<std::uint32_t>("num_experts");
    }

    const auto num_labels = r.pod<std::uint32_t>("channel count");
    std::vector<std::string> labels;
    for (std::uint32_t i = 0; i < num_labels; ++i) {
        labels.push_back(r.str("channel label"));
    }

    const auto num_entries = r.pod<std::uint32_t>("tensor count");
    std::vector<DirEntry> entries;
    for (std::uint32_t i = 0; i < num_entries; ++i) {
        DirEntry e;
        e.name = r.str("tensor name");
        const auto dtype = r.pod<std::uint8_t>("tensor dtype");
        if (dtype != kDtypeF64) {
            throw FormatError("checkpoint: unsupported dtype for " + e.name, r.offset());
        }
        e.rank = r.pod<std::uint8_t>("tensor rank");
        for (std::uint8_t d = 0; d < e.rank; ++d) {
            e.dims.push_back(r.pod<std::uint64_t>("tensor dim"));
        }
        e.offset = r.pod<std::uint64_t>("tensor offset");
        entries.push_back(std::move(e));
    }

    // rebuild the model skeleton, then overwrite every tensor from the payload
    auto model = ModelState::build(cfg, std::move(tasks), variant, /*seed=*/0);
    model.channels = ChannelRegistry(cfg.max_channels);
    for (const auto& label : labels) {
        model.channels.register_label(label);
    }
    if (has_adapters) {
        attach(model, adapter_cfg);
    }

    std::map<std::string, Parameter*> by_name;
    for (Parameter* p : model.all_params()) {
        by_name[p->name] = p;
    }
    if (by_name.size() != entries.size()) {
        throw FormatError("checkpoint: tensor directory does not match the model structure",
                          r.offset());
    }
    for (const auto& e : entries) {
        auto it = by_name.find(e.name);
        if (it == by_name.end()) {
            throw FormatError("checkpoint: unknown tensor '" + e.name + "'", r.offset());
        }
        auto& tensor = *it->second->value;
        if (static_cast<std::size_t>(tensor.rank()) != e.dims.size()) {
            throw FormatError("checkpoint: rank mismatch for '" + e.name + "'", r.offset());
        }
        std::size_t count = 1;
        for (std::size_t d = 0; d < e.dims.size(); ++d) {
            if (static_cast<std::uint64_t>(tensor.shape[d]) != e.dims[d]) {
                throw FormatError("checkpoint: shape mismatch for '" + e.name + "'", r.offset());
            }
            count *= e.dims[d];
        }
        const std::uint64_t end = e.offset + count * sizeof(double);
        if (end > blob.size()) {
            throw FormatError("checkpoint: payload for '" + e.name + "' past end of file",
                              e.offset);
        }
        std::memcpy(tensor.data.data(), blob.data() + e.offset, count * sizeof(double));
    }
    return model;
}

}  // namespace mteeg
