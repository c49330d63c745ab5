#include "dialoscope/prompting.hpp"

#include "dialoscope/embedded_templates.hpp"
#include "dialoscope/error.hpp"
#include "str_util.hpp"

namespace dialoscope::prompting {

std::string_view to_string(TemplateKind kind) {
    switch (kind) {
        case TemplateKind::logits: return "logits";
        case TemplateKind::rating_first: return "rating_first";
        case TemplateKind::analysis_first: return "analysis_first";
    }
    return "unknown";
}

TemplateKind parse_template_kind(std::string_view name) {
    if (name == "logits") return TemplateKind::logits;
    if (name == "rating_first") return TemplateKind::rating_first;
    if (name == "analysis_first") return TemplateKind::analysis_first;
    throw ConfigError("unknown template kind: " + std::string(name));
}

std::string_view template_body(TemplateKind kind) {
    switch (kind) {
        case TemplateKind::logits: return embedded::logits;
        case TemplateKind::rating_first: return embedded::rating_first;
        case TemplateKind::analysis_first: return embedded::analysis_first;
    }
    throw ConfigError("unknown template kind");
}

InContextExample InContextExample::from(const corpus::Dialogue& dialogue) {
    if (!dialogue.gold) {
        throw DataError("dialogue " + dialogue.id + " has no gold rating and cannot be an example");
    }
    return {dialogue, *dialogue.gold};
}

std::size_t AssembledPrompt::char_count() const { return detail::utf8_length(text); }

namespace {

std::string substitute(std::string_view body, std::string_view examples, std::string_view dialogue) {
    std::string out;
    out.reserve(body.size() + examples.size() + dialogue.size());
    std::size_t pos = 0;
    while (pos < body.size()) {
        const auto next = body.find('{', pos);
        if (next == std::string_view::npos) {
            out.append(body.substr(pos));
            break;
        }
        out.append(body.substr(pos, next - pos));
        const auto rest = body.substr(next);
        if (rest.starts_with(kExamplesMarker)) {
            out.append(examples);
            pos = next + kExamplesMarker.size();
        } else if (rest.starts_with(kDialogueMarker)) {
            out.append(dialogue);
            pos = next + kDialogueMarker.size();
        } else {
            out.push_back('{');
            pos = next + 1;
        }
    }
    return out;
}

}  // namespace

std::string render_example_block(const InContextExample& example) {
    return corpus::serialize_dialogue(example.dialogue) + "\nScore: " +
           std::to_string(example.gold.value()) + "\n\n";
}

AssembledPrompt render_zero_shot(TemplateKind kind, const corpus::Dialogue& dialogue) {
    AssembledPrompt prompt;
    prompt.kind = kind;
    prompt.text = substitute(template_body(kind), "", corpus::serialize_dialogue(dialogue));
    return prompt;
}

AssembledPrompt render_few_shot(TemplateKind kind, const corpus::Dialogue& dialogue,
                                std::span<const InContextExample> examples) {
    if (examples.empty()) return render_zero_shot(kind, dialogue);

    AssembledPrompt prompt;
    prompt.kind = kind;
    std::string block;
    for (auto it = examples.rbegin(); it != examples.rend(); ++it) {
        auto one = render_example_block(*it);
        prompt.example_ids.push_back(it->dialogue.id);
        prompt.example_block_sizes.push_back(one.size());
        block += one;
    }
    prompt.text = substitute(template_body(kind), block, corpus::serialize_dialogue(dialogue));
    return prompt;
}

AssembledPrompt fit_to_budget(const AssembledPrompt& prompt, std::size_t max_chars) {
    if (prompt.char_count() <= max_chars) return prompt;

    // Templates place {examples} before {dialogue}, so the blocks start at
    // the marker's offset in the raw body.
    const auto marker = template_body(prompt.kind).find(kExamplesMarker);
    const std::size_t offset = marker == std::string_view::npos ? 0 : marker;

    AssembledPrompt out = prompt;
    std::size_t drop_bytes = 0;
    std::size_t dropped = 0;
    std::size_t chars = prompt.char_count();
    const std::string_view text = prompt.text;
    while (dropped < prompt.example_block_sizes.size() && chars > max_chars) {
        const auto size = prompt.example_block_sizes[dropped];
        chars -= detail::utf8_length(text.substr(offset + drop_bytes, size));
        drop_bytes += size;
        ++dropped;
    }
    if (chars > max_chars) {
        throw DataError("prompt budget of " + std::to_string(max_chars) +
                        " characters is below the zero-shot rendering (" + std::to_string(chars) +
                        " characters)");
    }
    out.text.erase(offset, drop_bytes);
    out.example_ids.erase(out.example_ids.begin(),
                          out.example_ids.begin() + static_cast<std::ptrdiff_t>(dropped));
    out.example_block_sizes.erase(
        out.example_block_sizes.begin(),
        out.example_block_sizes.begin() + static_cast<std::ptrdiff_t>(dropped));
    out.truncated = dropped > 0 || prompt.truncated;
    return out;
}

}  // namespace dialoscope::prompting
