#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mteeg/preprocessing.hpp"

namespace mteeg {

// Flat binary recording format:
//   magic "MTRC", version u32, C u32, N u64, rate f64, then C*N f32 row-major,
//   all little-endian.
void write_recording_mtrc(const std::string& path, const RawRecording& rec);
RawRecording read_recording_mtrc(const std::string& path,
                                 std::vector<std::string> channel_names = {});

/// CSV recording: header row of channel names, one channel per column.
/// The format carries no sample rate, so the caller supplies it.
RawRecording read_recording_csv(const std::string& path, double sample_rate_hz);
void write_recording_csv(const std::string& path, const RawRecording& rec);

/// One dataset sample: a recording file plus its label.
struct ManifestEntry {
    std::string sample_id;
    std::int64_t task_id = 0;
    std::string split;  // train | val | test
    std::int64_t label = 0;
};

// Label manifest CSV with header sample_id,task_id,split,label.
void write_label_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_label_manifest(const std::string& path);

}  // namespace mteeg
