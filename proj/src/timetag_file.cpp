#include "qkdsim/timetag_file.hpp"

#include "qkdsim/readout.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace qkdsim {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic{'Q', 'T', 'T', '1'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, std::size_t at, T value)
{
    static_assert(std::is_unsigned_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i)
        out[at + i] = static_cast<std::uint8_t>(value >> (8 * i));
}

template <typename T>
T get_le(std::span<const std::uint8_t> in, std::size_t at)
{
    static_assert(std::is_unsigned_v<T>);
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
        value |= static_cast<T>(static_cast<T>(in[at + i]) << (8 * i));
    return value;
}

}  // namespace

const char* to_string(FormatErrorKind kind)
{
    switch (kind) {
    case FormatErrorKind::truncated_header:
        return "truncated header";
    case FormatErrorKind::bad_magic:
        return "bad magic";
    case FormatErrorKind::bad_version:
        return "unsupported version";
    case FormatErrorKind::bad_flags:
        return "unknown flags";
    case FormatErrorKind::bad_header:
        return "invalid header field";
    case FormatErrorKind::truncated_body:
        return "truncated body";
    case FormatErrorKind::bad_word:
        return "invalid event word";
    case FormatErrorKind::truncated_calibration:
        return "truncated calibration table";
    case FormatErrorKind::bad_calibration:
        return "invalid calibration table";
    case FormatErrorKind::trailing_data:
        return "trailing data";
    case FormatErrorKind::io:
        return "i/o error";
    }
    return "format error";
}

FormatError::FormatError(FormatErrorKind kind, std::uint64_t offset, const std::string& detail)
    : std::runtime_error(fmt::format("{} at byte offset {}: {}", to_string(kind), offset, detail)),
      kind_(kind),
      offset_(offset)
{
}

std::vector<std::uint8_t> encode_timetag(const TimetagHeader& header, std::span<const std::uint64_t> words,
                                         const CalibrationSet& calibration)
{
    if (header.n_taps == 0 || header.n_channels == 0 || header.n_channels > 32)
        throw ConfigError("timetag: n_taps must be > 0 and n_channels in [1, 32]");
    if (!(header.clock_period > 0.0))
        throw ConfigError("timetag: clock_period must be > 0");
    for (const auto& [channel, table] : calibration.tables()) {
        if (channel >= header.n_channels)
            throw ConfigError(fmt::format("timetag: calibration for channel {} beyond n_channels", channel));
        if (table.max_code() != header.n_taps)
            throw ConfigError(fmt::format("timetag: calibration for channel {} has {} codes, expected {}", channel,
                                          table.max_code() + 1, header.n_taps + 1));
    }

    const bool with_cal = !calibration.empty();
    const std::size_t body_end = kTimetagHeaderSize + 8 * words.size();
    const std::size_t cal_size = with_cal ? std::size_t{header.n_channels} * header.n_taps * 8 : 0;
    std::vector<std::uint8_t> out(body_end + cal_size, 0);

    std::copy(kMagic.begin(), kMagic.end(), out.begin());
    put_le<std::uint16_t>(out, 4, kTimetagVersion);
    put_le<std::uint16_t>(out, 6, with_cal ? kFlagCalibration : 0);
    put_le<std::uint64_t>(out, 8, std::bit_cast<std::uint64_t>(header.clock_period));
    put_le<std::uint16_t>(out, 16, header.n_taps);
    put_le<std::uint16_t>(out, 18, header.n_channels);
    put_le<std::uint64_t>(out, 20, with_cal ? body_end : 0);
    put_le<std::uint64_t>(out, 28, words.size());

    for (std::size_t i = 0; i < words.size(); ++i)
        put_le<std::uint64_t>(out, kTimetagHeaderSize + 8 * i, words[i]);

    if (with_cal) {
        std::size_t at = body_end;
        for (ChannelId ch = 0; ch < header.n_channels; ++ch) {
            const bool present = calibration.contains(ch);
            for (std::uint32_t k = 0; k < header.n_taps; ++k, at += 8) {
                const double w = present ? calibration.at(ch).bin_widths()[k] : 0.0;
                put_le<std::uint64_t>(out, at, std::bit_cast<std::uint64_t>(w));
            }
        }
    }
    return out;
}

TimetagFile decode_timetag(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < kTimetagHeaderSize)
        throw FormatError(FormatErrorKind::truncated_header, bytes.size(),
                          fmt::format("need {} header bytes, have {}", kTimetagHeaderSize, bytes.size()));
    for (std::size_t i = 0; i < kMagic.size(); ++i)
        if (bytes[i] != kMagic[i])
            throw FormatError(FormatErrorKind::bad_magic, 0, "expected \"QTT1\"");

    TimetagFile file;
    TimetagHeader& h = file.header;
    h.version = get_le<std::uint16_t>(bytes, 4);
    if (h.version != kTimetagVersion)
        throw FormatError(FormatErrorKind::bad_version, 4, fmt::format("version {}", h.version));
    h.flags = get_le<std::uint16_t>(bytes, 6);
    if (h.flags & ~kFlagCalibration)
        throw FormatError(FormatErrorKind::bad_flags, 6, fmt::format("flags 0x{:04x}", h.flags));
    h.clock_period = std::bit_cast<double>(get_le<std::uint64_t>(bytes, 8));
    if (!(h.clock_period > 0.0) || !std::isfinite(h.clock_period))
        throw FormatError(FormatErrorKind::bad_header, 8, "clock period must be finite and > 0");
    h.n_taps = get_le<std::uint16_t>(bytes, 16);
    if (h.n_taps == 0)
        throw FormatError(FormatErrorKind::bad_header, 16, "n_taps is zero");
    h.n_channels = get_le<std::uint16_t>(bytes, 18);
    if (h.n_channels == 0 || h.n_channels > 32)
        throw FormatError(FormatErrorKind::bad_header, 18, fmt::format("n_channels {}", h.n_channels));
    h.calibration_offset = get_le<std::uint64_t>(bytes, 20);
    h.record_count = get_le<std::uint64_t>(bytes, 28);
    for (std::size_t i = 36; i < kTimetagHeaderSize; ++i)
        if (bytes[i] != 0)
            throw FormatError(FormatErrorKind::bad_header, i, "reserved header byte is nonzero");

    const std::uint64_t available_words = (bytes.size() - kTimetagHeaderSize) / 8;
    if (h.record_count > available_words)
        throw FormatError(FormatErrorKind::truncated_body, kTimetagHeaderSize + 8 * available_words,
                          fmt::format("header declares {} records, file holds {}", h.record_count, available_words));
    const std::uint64_t body_end = kTimetagHeaderSize + 8 * h.record_count;

    file.words.reserve(h.record_count);
    for (std::uint64_t i = 0; i < h.record_count; ++i) {
        const std::uint64_t at = kTimetagHeaderSize + 8 * i;
        const std::uint64_t word = get_le<std::uint64_t>(bytes, at);
        if (word & kReservedMask)
            throw FormatError(FormatErrorKind::bad_word, at, "reserved bits set");
        if (((word >> kChannelShift) & ((1U << kChannelWidth) - 1)) >= h.n_channels)
            throw FormatError(FormatErrorKind::bad_word, at, "channel beyond n_channels");
        file.words.push_back(word);
    }

    const bool with_cal = (h.flags & kFlagCalibration) != 0;
    if (!with_cal) {
        if (h.calibration_offset != 0)
            throw FormatError(FormatErrorKind::bad_header, 20, "calibration offset set without the flag");
        if (bytes.size() != body_end)
            throw FormatError(FormatErrorKind::trailing_data, body_end,
                              fmt::format("{} bytes after the last record", bytes.size() - body_end));
        return file;
    }

    if (h.calibration_offset != body_end)
        throw FormatError(FormatErrorKind::bad_header, 20,
                          fmt::format("calibration offset {} != end of records {}", h.calibration_offset, body_end));
    const std::uint64_t cal_size = std::uint64_t{h.n_channels} * h.n_taps * 8;
    if (bytes.size() < body_end + cal_size)
        throw FormatError(FormatErrorKind::truncated_calibration, bytes.size(),
                          fmt::format("calibration table needs {} bytes, have {}", cal_size, bytes.size() - body_end));
    if (bytes.size() > body_end + cal_size)
        throw FormatError(FormatErrorKind::trailing_data, body_end + cal_size,
                          fmt::format("{} bytes after the calibration table", bytes.size() - body_end - cal_size));

    std::uint64_t at = body_end;
    for (ChannelId ch = 0; ch < h.n_channels; ++ch) {
        const std::uint64_t row_start = at;
        std::vector<Picoseconds> widths(std::size_t{h.n_taps} + 1, 0.0);
        bool any = false;
        for (std::uint32_t k = 0; k < h.n_taps; ++k, at += 8) {
            widths[k] = std::bit_cast<double>(get_le<std::uint64_t>(bytes, at));
            if (!(widths[k] >= 0.0) || !std::isfinite(widths[k]))
                throw FormatError(FormatErrorKind::bad_calibration, at, "bin width must be finite and >= 0");
            any = any || widths[k] > 0.0;
        }
        if (!any)
            continue;
        double sum = 0.0;
        for (std::uint32_t k = 0; k < h.n_taps; ++k)
            sum += widths[k];
        // Residues at rounding level belong to no code.
        const double rest = h.clock_period - sum;
        widths.back() = rest > 1e-9 * h.clock_period ? rest : 0.0;
        try {
            file.calibration.insert(CalibrationTable::from_widths(ch, h.clock_period, std::move(widths)));
        } catch (const std::exception& e) {
            throw FormatError(FormatErrorKind::bad_calibration, row_start, e.what());
        }
    }
    return file;
}

void write_timetag_file(const std::filesystem::path& path, const TimetagHeader& header,
                        std::span<const std::uint64_t> words, const CalibrationSet& calibration)
{
    const auto bytes = encode_timetag(header, words, calibration);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw FormatError(FormatErrorKind::io, 0, fmt::format("cannot open {} for writing", path.string()));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw FormatError(FormatErrorKind::io, 0, fmt::format("write to {} failed", path.string()));
}

TimetagFile read_timetag_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw FormatError(FormatErrorKind::io, 0, fmt::format("cannot open {}", path.string()));
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_timetag(bytes);
}

}  // namespace qkdsim
