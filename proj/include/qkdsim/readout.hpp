#pragma once

#include "qkdsim/common.hpp"
#include "qkdsim/tdc.hpp"

#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace qkdsim {

// Event word layout (64-bit, little-endian on disk):
//   bits [0, 9)   fine code
//   bits [9, 49)  coarse count
//   bits [49, 54) channel
//   bit  54       rollover (coarse epoch parity)
//   bits [55, 64) reserved, zero
inline constexpr unsigned kFineShift = 0;
inline constexpr unsigned kFineWidth = 9;
inline constexpr unsigned kCoarseShift = 9;
inline constexpr unsigned kCoarseWidth = 40;
inline constexpr unsigned kChannelShift = 49;
inline constexpr unsigned kChannelWidth = 5;
inline constexpr unsigned kRolloverBit = 54;
inline constexpr std::uint64_t kReservedMask = ~((std::uint64_t{1} << 55) - 1);

class PackError : public std::range_error {
public:
    using std::range_error::range_error;
};

/// Throws PackError when a field does not fit; never truncates.
std::uint64_t pack(const TdcRecord& record, bool rollover);

struct UnpackedWord {
    TdcRecord record;
    bool rollover = false;
};

/// Throws PackError when reserved bits are set.
UnpackedWord unpack(std::uint64_t word);

/// Recovers a monotone per-channel coarse count from wrapped coarse fields and
/// the epoch-parity flag. Consecutive words on a channel may be up to two
/// full counter ranges apart.
class CoarseUnwrapper {
public:
    explicit CoarseUnwrapper(std::uint32_t coarse_bits, std::uint32_t n_channels = 32);
    std::uint64_t unwrap(ChannelId channel, std::uint64_t coarse, bool rollover);

private:
    struct Track {
        bool seen = false;
        std::uint64_t epoch = 0;
        std::uint64_t last_coarse = 0;
    };
    std::uint32_t coarse_bits_;
    std::vector<Track> tracks_;
};

struct TimedWord {
    Picoseconds time = 0.0;  // when the word reaches the readout buffer
    std::uint64_t word = 0;
};

inline constexpr std::size_t kUnboundedDepth = std::numeric_limits<std::size_t>::max();

struct StreamOptions {
    std::size_t depth = 4096;               // words
    std::uint64_t link_rate = 35'000'000;   // bytes/s
    std::uint32_t word_size = 8;            // bytes
    Picoseconds tick = 1.0e6;               // 1 us
    bool drain_tail = true;                 // keep ticking after the last arrival until empty
    bool keep_words = true;
};

struct ReadoutBuffer {
    std::size_t depth = 0;
    std::size_t occupancy = 0;
    std::uint64_t drops = 0;
    std::uint64_t drained_bytes = 0;
    std::uint64_t offered = 0;
    std::uint64_t delivered = 0;
    std::uint64_t ticks = 0;  // link ticks run, including idle ones

    /// offered == delivered + drops + occupancy
    bool conserved() const { return offered == delivered + drops + occupancy; }
};

/// Discrete-time readout link: words arriving during a tick are enqueued
/// (dropped when the buffer is full), then the link drains up to its byte
/// budget for that tick. Unused budget carries over only while words wait,
/// so delivered_bytes <= ticks * link_rate * tick holds exactly.
class ReadoutLink {
public:
    explicit ReadoutLink(StreamOptions options);

    /// Words must be offered in non-decreasing time order.
    void offer(Picoseconds time, std::uint64_t word);
    /// Completes the current tick and, with drain_tail, empties the buffer.
    void finish();

    const ReadoutBuffer& buffer() const { return buffer_; }
    const std::vector<std::uint64_t>& delivered_words() const { return delivered_; }
    std::vector<std::uint64_t> take_delivered_words() { return std::move(delivered_); }

private:
    void run_tick();
    void advance_to_tick(std::uint64_t tick);

    StreamOptions options_;
    ReadoutBuffer buffer_;
    std::deque<std::uint64_t> queue_;
    std::vector<std::uint64_t> delivered_;
    std::uint64_t current_tick_ = 0;
    std::uint64_t credit_ = 0;  // micro-bytes
    std::uint64_t budget_ = 0;  // micro-bytes earned per tick
    std::uint64_t word_cost_ = 0;
    Picoseconds last_time_ = 0.0;
    bool finished_ = false;
};

struct StreamResult {
    ReadoutBuffer buffer;
    std::vector<std::uint64_t> words;
};

/// Runs `arrivals` (time-ordered) through a ReadoutLink.
StreamResult stream(std::span<const TimedWord> arrivals, const StreamOptions& options);

enum class CapScope { aggregate, per_channel };

struct CounterOptions {
    Picoseconds gate_length = 1.0e12;
    std::uint64_t n_gates = 1;
    Picoseconds dead_time = 30000.0;
    std::uint32_t n_channels = 16;
    double max_count_rate = 30.0e6;  // counts/s; 0 disables the cap
    CapScope cap_scope = CapScope::aggregate;
};

struct CounterBank {
    Picoseconds gate_length = 0.0;
    std::vector<std::vector<std::uint64_t>> counts;  // [channel][gate]
    std::uint64_t dead_time_suppressed = 0;
    std::uint64_t saturated = 0;  // hits beyond the count-rate cap
    std::uint64_t outside_gates = 0;

    std::uint64_t total(ChannelId channel) const;
};

/// Gated multi-channel counter. Bypasses the word stream; applies the same
/// per-channel dead time as the TDC. Hits per channel must be time-ordered.
class GatedCounter {
public:
    explicit GatedCounter(CounterOptions options);
    void add(const RawHit& hit);
    const CounterBank& bank() const { return bank_; }

private:
    CounterOptions options_;
    CounterBank bank_;
    std::vector<std::optional<Picoseconds>> last_accept_;
    std::vector<std::vector<std::uint64_t>> cap_used_;  // [scope slot][gate]
    std::uint64_t cap_budget_ = 0;                     // counts per gate per scope slot
};

CounterBank count_gated(std::span<const RawHit> hits, const CounterOptions& options);

}  // namespace qkdsim
