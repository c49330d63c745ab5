#include "dialoscope/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

#include "dialoscope/error.hpp"
#include "random.hpp"
#include "str_util.hpp"

namespace dialoscope::corpus {

using json = nlohmann::json;

std::string_view to_string(Speaker speaker) {
    return speaker == Speaker::user ? "user" : "system";
}

std::string_view to_string(BinaryLabel label) {
    return label == BinaryLabel::defect ? "defect" : "non_defect";
}

LikertRating::LikertRating(int value) : value_(value) {
    if (value < 1 || value > 5) {
        throw DataError("Likert rating must be in 1..5, got " + std::to_string(value));
    }
}

namespace {

[[noreturn]] void fail(std::size_t line, std::string_view field, std::string_view what) {
    std::ostringstream msg;
    msg << "line " << line << ": field '" << field << "': " << what;
    throw DataError(msg.str());
}

const json& require(const json& obj, std::size_t line, const char* field) {
    auto it = obj.find(field);
    if (it == obj.end()) fail(line, field, "missing");
    return *it;
}

Turn parse_turn(const json& j, std::size_t line, std::size_t index) {
    const std::string where = "turns[" + std::to_string(index) + "]";
    if (!j.is_object()) fail(line, where, "expected an object");
    const auto& speaker = require(j, line, "speaker");
    const auto& text = require(j, line, "text");
    if (!speaker.is_string()) fail(line, where + ".speaker", "expected a string");
    if (!text.is_string()) fail(line, where + ".text", "expected a string");

    Turn turn;
    const auto& s = speaker.get_ref<const std::string&>();
    if (s == "user") {
        turn.speaker = Speaker::user;
    } else if (s == "system") {
        turn.speaker = Speaker::system;
    } else {
        fail(line, where + ".speaker", "must be \"user\" or \"system\", got \"" + s + "\"");
    }
    turn.text = text.get<std::string>();
    if (detail::trim(turn.text).empty()) fail(line, where + ".text", "empty after trimming");
    return turn;
}

Dialogue parse_record(std::string_view raw, std::size_t line) {
    json j;
    try {
        j = json::parse(raw);
    } catch (const json::parse_error& e) {
        fail(line, "<record>", std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) fail(line, "<record>", "expected a JSON object");

    Dialogue d;
    const auto& id = require(j, line, "id");
    if (!id.is_string() || id.get_ref<const std::string&>().empty()) {
        fail(line, "id", "expected a non-empty string");
    }
    d.id = id.get<std::string>();

    const auto& source = require(j, line, "source");
    if (!source.is_string()) fail(line, "source", "expected a string");
    d.source = source.get<std::string>();

    const auto& turns = require(j, line, "turns");
    if (!turns.is_array()) fail(line, "turns", "expected an array");
    if (turns.empty()) fail(line, "turns", "must be non-empty");
    d.turns.reserve(turns.size());
    for (std::size_t i = 0; i < turns.size(); ++i) d.turns.push_back(parse_turn(turns[i], line, i));

    if (auto it = j.find("rating"); it != j.end() && !it->is_null()) {
        if (!it->is_number_integer()) fail(line, "rating", "expected an integer");
        const auto value = it->get<long long>();
        if (value < 1 || value > 5) fail(line, "rating", "must be in 1..5, got " + std::to_string(value));
        d.gold = LikertRating(static_cast<int>(value));
    }
    return d;
}

}  // namespace

std::vector<Dialogue> parse_dataset(std::istream& in) {
    std::vector<Dialogue> out;
    std::unordered_set<std::string> seen;
    std::string raw;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
        ++line;
        if (!raw.empty() && raw.back() == '\r') raw.pop_back();
        if (detail::trim(raw).empty()) continue;
        auto d = parse_record(raw, line);
        if (!seen.insert(d.id).second) fail(line, "id", "duplicate id \"" + d.id + "\"");
        out.push_back(std::move(d));
    }
    return out;
}

std::vector<Dialogue> load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open dataset " + path.string());
    try {
        return parse_dataset(in);
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

void write_dataset(std::ostream& out, std::span<const Dialogue> dialogues) {
    for (const auto& d : dialogues) {
        json j;
        j["id"] = d.id;
        j["source"] = d.source;
        j["turns"] = json::array();
        for (const auto& t : d.turns) {
            j["turns"].push_back({{"speaker", to_string(t.speaker)}, {"text", t.text}});
        }
        if (d.gold) j["rating"] = d.gold->value();
        out << j.dump() << '\n';
    }
}

void save_dataset(const std::filesystem::path& path, std::span<const Dialogue> dialogues) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    write_dataset(out, dialogues);
    if (!out) throw DataError("write failed for " + path.string());
}

std::size_t test_split_size(std::size_t n, double test_fraction) {
    const auto wanted = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
    return std::clamp<std::size_t>(wanted, 1, n - 1);
}

DatasetSplit split_dataset(std::span<const Dialogue> dialogues, double test_fraction,
                           std::uint64_t seed) {
    if (dialogues.size() < 2) throw DataError("split needs at least 2 dialogues");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
        throw ConfigError("test fraction must lie in (0, 1)");
    }
    const std::size_t n = dialogues.size();
    const std::size_t n_test = test_split_size(n, test_fraction);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    detail::seeded_shuffle(order, seed);

    std::vector<bool> in_test(n, false);
    for (std::size_t i = 0; i < n_test; ++i) in_test[order[i]] = true;

    DatasetSplit split;
    split.test.reserve(n_test);
    split.train.reserve(n - n_test);
    for (std::size_t i = 0; i < n; ++i) {
        (in_test[i] ? split.test : split.train).push_back(dialogues[i]);
    }
    return split;
}

BinaryLabel binarize(LikertRating rating, int threshold) {
    if (threshold < 1 || threshold > 4) {
        throw ConfigError("binarization threshold must be in 1..4, got " + std::to_string(threshold));
    }
    return rating.value() <= threshold ? BinaryLabel::defect : BinaryLabel::non_defect;
}

std::string serialize_dialogue(const Dialogue& dialogue) {
    std::string out;
    for (std::size_t i = 0; i < dialogue.turns.size(); ++i) {
        if (i > 0) out += '\n';
        const auto& turn = dialogue.turns[i];
        out += turn.speaker == Speaker::user ? "User: " : "System: ";
        out += turn.text;
    }
    return out;
}

double defect_rate(std::span<const BinaryLabel> labels) {
    if (labels.empty()) throw DataError("defect rate of an empty label list");
    const auto defects = std::count(labels.begin(), labels.end(), BinaryLabel::defect);
    return static_cast<double>(defects) / static_cast<double>(labels.size());
}

}  // namespace dialoscope::corpus
