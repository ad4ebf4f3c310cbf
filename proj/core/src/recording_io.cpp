#include "mteeg/recording_io.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "mteeg/errors.hpp"

namespace mteeg {

namespace {

constexpr char kMagic[4] = {'M', 'T', 'R', 'C'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, std::uint64_t& offset, const char* what) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) {
        throw FormatError(std::string("recording: truncated while reading ") + what, offset);
    }
    offset += sizeof(T);
    return value;
}

}  // namespace

void write_recording_mtrc(const std::string& path, const RawRecording& rec) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FileError("cannot open for writing: " + path);
    }
    out.write(kMagic, 4);
    write_pod(out, kVersion);
    write_pod(out, static_cast<std::uint32_t>(rec.channels()));
    write_pod(out, static_cast<std::uint64_t>(rec.num_samples()));
    write_pod(out, rec.sample_rate_hz);
    std::vector<float> row(static_cast<std::size_t>(rec.num_samples()));
    for (std::int64_t c = 0; c < rec.channels(); ++c) {
        const double* src = rec.samples->data.data() + c * rec.num_samples();
        for (std::int64_t i = 0; i < rec.num_samples(); ++i) {
            row[static_cast<std::size_t>(i)] = static_cast<float>(src[i]);
        }
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!out) {
        throw FileError("write failed: " + path);
    }
}

RawRecording read_recording_mtrc(const std::string& path, std::vector<std::string> channel_names) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FileError("cannot open for reading: " + path);
    }
    std::uint64_t offset = 0;
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("recording: bad magic", 0);
    }
    offset += 4;
    const auto version = read_pod<std::uint32_t>(in, offset, "version");
    if (version != kVersion) {
        throw FormatError("recording: unsupported version " + std::to_string(version), 4);
    }
    const auto channels = read_pod<std::uint32_t>(in, offset, "channel count");
    const auto samples = read_pod<std::uint64_t>(in, offset, "sample count");
    const auto rate = read_pod<double>(in, offset, "sample rate");
    if (channels == 0 || samples == 0 || rate <= 0.0) {
        throw FormatError("recording: invalid header fields", offset);
    }

    auto rec = RawRecording::create(rate, static_cast<std::int64_t>(channels),
                                    static_cast<std::int64_t>(samples), std::move(channel_names));
    std::vector<float> row(samples);
    for (std::uint32_t c = 0; c < channels; ++c) {
        in.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(row.size() * sizeof(float)));
        if (!in) {
            throw FormatError("recording: truncated sample payload", offset);
        }
        offset += row.size() * sizeof(float);
        double* dst = rec.samples->data.data() + static_cast<std::int64_t>(c) *
                                                     static_cast<std::int64_t>(samples);
        for (std::size_t i = 0; i < row.size(); ++i) {
            dst[i] = static_cast<double>(row[i]);
        }
    }
    return rec;
}

RawRecording read_recording_csv(const std::string& path, double sample_rate_hz) {
    std::ifstream in(path);
    if (!in) {
        throw FileError("cannot open for reading: " + path);
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw DataError("csv recording: missing header row");
    }
    std::vector<std::string> names;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            names.push_back(cell);
        }
    }
    if (names.empty()) {
        throw DataError("csv recording: empty header row");
    }
    std::vector<std::vector<double>> columns(names.size());
    std::int64_t rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::stringstream ss(line);
        std::string cell;
        std::size_t col = 0;
        while (std::getline(ss, cell, ',')) {
            if (col >= columns.size()) {
                throw DataError("csv recording: row wider than header");
            }
            columns[col].push_back(std::stod(cell));
            ++col;
        }
        if (col != columns.size()) {
            throw DataError("csv recording: row narrower than header");
        }
        ++rows;
    }
    if (rows == 0) {
        throw DataError("csv recording: no sample rows");
    }
    auto rec = RawRecording::create(sample_rate_hz, static_cast<std::int64_t>(names.size()), rows,
                                    names);
    for (std::size_t c = 0; c < columns.size(); ++c) {
        std::copy(columns[c].begin(), columns[c].end(),
                  rec.samples->data.begin() + static_cast<std::ptrdiff_t>(c) * rows);
    }
    return rec;
}

void write_recording_csv(const std::string& path, const RawRecording& rec) {
    std::ofstream out(path);
    if (!out) {
        throw FileError("cannot open for writing: " + path);
    }
    for (std::int64_t c = 0; c < rec.channels(); ++c) {
        out << rec.channel_names[static_cast<std::size_t>(c)]
            << (c + 1 == rec.channels() ? "\n" : ",");
    }
    out.precision(17);
    for (std::int64_t i = 0; i < rec.num_samples(); ++i) {
        for (std::int64_t c = 0; c < rec.channels(); ++c) {
            out << rec.samples->at(c * rec.num_samples() + i)
                << (c + 1 == rec.channels() ? "\n" : ",");
        }
    }
}

void write_label_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream out(path);
    if (!out) {
        throw FileError("cannot open for writing: " + path);
    }
    out << "sample_id,task_id,split,label\n";
    for (const auto& e : entries) {
        out << e.sample_id << ',' << e.task_id << ',' << e.split << ',' << e.label << '\n';
    }
}

std::vector<ManifestEntry> read_label_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw FileError("cannot open for reading: " + path);
    }
    std::string line;
    if (!std::getline(in, line) || line != "sample_id,task_id,split,label") {
        throw DataError("label manifest: bad header");
    }
    std::vector<ManifestEntry> entries;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::stringstream ss(line);
        ManifestEntry e;
        std::string task_id;
        std::string label;
        if (!std::getline(ss, e.sample_id, ',') || !std::getline(ss, task_id, ',') ||
            !std::getline(ss, e.split, ',') || !std::getline(ss, label, ',')) {
            throw DataError("label manifest: malformed row: " + line);
        }
        e.task_id = std::stoll(task_id);
        e.label = std::stoll(label);
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace mteeg
