#pragma once

// Time-tag file, all fields little-endian:
//
//   offset  size  field
//   0       4     magic "QTT1"
//   4       2     version (1)
//   6       2     flags (bit 0: calibration table present)
//   8       8     clock period, ps (f64)
//   16      2     n_taps
//   18      2     n_channels
//   20      8     calibration table offset (0 = absent)
//   28      8     record count
//   36      28    reserved, zero
//   64      8*N   event words
//   [table]       n_channels rows of n_taps f64 bin widths (codes 0..n_taps-1);
//                 the width of code n_taps is the period minus the row sum.
//                 An all-zero row marks an uncalibrated channel.

#include "qkdsim/calibration.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace qkdsim {

inline constexpr std::size_t kTimetagHeaderSize = 64;
inline constexpr std::uint16_t kTimetagVersion = 1;
inline constexpr std::uint16_t kFlagCalibration = 0x1;

struct TimetagHeader {
    std::uint16_t version = kTimetagVersion;
    std::uint16_t flags = 0;
    Picoseconds clock_period = 6250.0;
    std::uint16_t n_taps = 261;
    std::uint16_t n_channels = 16;
    std::uint64_t calibration_offset = 0;
    std::uint64_t record_count = 0;
};

struct TimetagFile {
    TimetagHeader header;
    std::vector<std::uint64_t> words;
    CalibrationSet calibration;
};

enum class FormatErrorKind {
    truncated_header,
    bad_magic,
    bad_version,
    bad_flags,
    bad_header,
    truncated_body,
    bad_word,
    truncated_calibration,
    bad_calibration,
    trailing_data,
    io,
};

const char* to_string(FormatErrorKind kind);

class FormatError : public std::runtime_error {
public:
    FormatError(FormatErrorKind kind, std::uint64_t offset, const std::string& detail);

    FormatErrorKind kind() const { return kind_; }
    std::uint64_t offset() const { return offset_; }

private:
    FormatErrorKind kind_;
    std::uint64_t offset_;
};

/// Header fields flags, calibration_offset and record_count are derived from
/// the words and the calibration set; the rest are taken from `header`.
std::vector<std::uint8_t> encode_timetag(const TimetagHeader& header, std::span<const std::uint64_t> words,
                                         const CalibrationSet& calibration = {});

TimetagFile decode_timetag(std::span<const std::uint8_t> bytes);

void write_timetag_file(const std::filesystem::path& path, const TimetagHeader& header,
                        std::span<const std::uint64_t> words, const CalibrationSet& calibration = {});

TimetagFile read_timetag_file(const std::filesystem::path& path);

}  // namespace qkdsim
