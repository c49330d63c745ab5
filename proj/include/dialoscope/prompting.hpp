#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dialoscope/corpus.hpp"

namespace dialoscope::prompting {

enum class TemplateKind { logits, rating_first, analysis_first };

std::string_view to_string(TemplateKind kind);
/// Throws ConfigError for unknown names.
TemplateKind parse_template_kind(std::string_view name);

/// Raw template body, including the {examples} and {dialogue} markers.
std::string_view template_body(TemplateKind kind);

inline constexpr std::string_view kExamplesMarker = "{examples}";
inline constexpr std::string_view kDialogueMarker = "{dialogue}";

struct InContextExample {
    corpus::Dialogue dialogue;
    corpus::LikertRating gold;

    /// Throws DataError when the dialogue carries no gold rating.
    static InContextExample from(const corpus::Dialogue& dialogue);
};

struct AssembledPrompt {
    std::string text;
    TemplateKind kind = TemplateKind::logits;
    std::vector<std::string> example_ids;  // rendered order
    bool truncated = false;
    // Byte length of each rendered example block, parallel to example_ids.
    std::vector<std::size_t> example_block_sizes;

    std::size_t char_count() const;
};

AssembledPrompt render_zero_shot(TemplateKind kind, const corpus::Dialogue& dialogue);

/// `examples` come ranked best match first, as selectors return them. They
/// are rendered in reverse, so the best match sits right before the target.
/// An empty list yields the zero-shot rendering.
AssembledPrompt render_few_shot(TemplateKind kind, const corpus::Dialogue& dialogue,
                                std::span<const InContextExample> examples);

/// One example block: serialized dialogue, "Score: <gold>", blank line.
std::string render_example_block(const InContextExample& example);

/// Drops whole examples from the front (least similar) until the prompt is
/// at most max_chars code points. Throws DataError if even the zero-shot
/// part does not fit.
AssembledPrompt fit_to_budget(const AssembledPrompt& prompt, std::size_t max_chars);

}  // namespace dialoscope::prompting
