#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dialoscope::corpus {

enum class Speaker { user, system };

std::string_view to_string(Speaker speaker);

struct Turn {
    Speaker speaker;
    std::string text;

    bool operator==(const Turn&) const = default;
};

/// Dialogue-level satisfaction score on the 1..5 scale.
class LikertRating {
public:
    /// Throws DataError when value is outside 1..5.
    explicit LikertRating(int value);

    int value() const noexcept { return value_; }

    auto operator<=>(const LikertRating&) const = default;

private:
    int value_;
};

struct Dialogue {
    std::string id;
    std::vector<Turn> turns;
    std::optional<LikertRating> gold;
    std::string source;

    bool operator==(const Dialogue&) const = default;
};

enum class BinaryLabel { defect, non_defect };

std::string_view to_string(BinaryLabel label);

struct DatasetSplit {
    std::vector<Dialogue> train;
    std::vector<Dialogue> test;
};

constexpr int kDefaultDefectThreshold = 3;

/// Parses the JSONL dataset format. Blank lines are skipped. Errors name the
/// 1-based line number and the offending field.
std::vector<Dialogue> parse_dataset(std::istream& in);
std::vector<Dialogue> load_dataset(const std::filesystem::path& path);

void write_dataset(std::ostream& out, std::span<const Dialogue> dialogues);
void save_dataset(const std::filesystem::path& path, std::span<const Dialogue> dialogues);

/// Seeded shuffle of the input; the first round(fraction * N) items (at least
/// one, at most N - 1) become the test set. Both halves keep input order.
DatasetSplit split_dataset(std::span<const Dialogue> dialogues, double test_fraction,
                           std::uint64_t seed);

/// Size of the test half that split_dataset produces for n items.
std::size_t test_split_size(std::size_t n, double test_fraction);

/// defect iff rating <= threshold; threshold must be in 1..4.
BinaryLabel binarize(LikertRating rating, int threshold = kDefaultDefectThreshold);

/// "User: ..." / "System: ..." lines joined by '\n', no trailing newline.
std::string serialize_dialogue(const Dialogue& dialogue);

double defect_rate(std::span<const BinaryLabel> labels);

}  // namespace dialoscope::corpus
