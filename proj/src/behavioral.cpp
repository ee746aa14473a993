#include "pcomp/behavioral.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include "pcomp/decomposition.hpp"
#include "pcomp/error.hpp"

namespace pcomp {

namespace {

icu::UnicodeString normalized_unicode(std::string_view text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfkc = icu::Normalizer2::getNFKCInstance(status);
  if (U_FAILURE(status)) throw Error("ICU NFKC normalizer unavailable");
  icu::UnicodeString source = icu::UnicodeString::fromUTF8(
      icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  icu::UnicodeString out = nfkc->normalize(source, status);
  if (U_FAILURE(status)) throw Error("NFKC normalization failed");
  out.toLower(icu::Locale::getRoot());
  out.findAndReplace(icu::UnicodeString(static_cast<UChar32>(0x2019)), icu::UnicodeString("'"));
  out.findAndReplace(icu::UnicodeString(static_cast<UChar32>(0x2018)), icu::UnicodeString("'"));
  out.findAndReplace(icu::UnicodeString(static_cast<UChar32>(0x02BC)), icu::UnicodeString("'"));
  return out;
}

std::u32string to_u32(const icu::UnicodeString& s) {
  std::u32string out;
  for (int32_t i = 0; i < s.length();) {
    const UChar32 c = s.char32At(i);
    out.push_back(static_cast<char32_t>(c));
    i += U16_LENGTH(c);
  }
  return out;
}

bool is_word_char(char32_t c) {
  const auto ch = static_cast<UChar32>(c);
  return c == U'_' || u_isalnum(ch) || (U_GET_GC_MASK(ch) & U_GC_M_MASK) != 0;
}

bool chars_match(char32_t text_char, char32_t pattern_char) {
  if (pattern_char == U' ') return u_isUWhiteSpace(static_cast<UChar32>(text_char)) != 0;
  return text_char == pattern_char;
}

bool occurs_with_boundaries(const std::u32string& text, const std::u32string& body,
                            bool wildcard) {
  if (body.empty() || body.size() > text.size()) return false;
  for (std::size_t i = 0; i + body.size() <= text.size(); ++i) {
    if (i > 0 && is_word_char(text[i - 1])) continue;
    std::size_t k = 0;
    while (k < body.size() && chars_match(text[i + k], body[k])) ++k;
    if (k != body.size()) continue;
    const std::size_t end = i + body.size();
    if (wildcard || end == text.size() || !is_word_char(text[end])) return true;
  }
  return false;
}

}  // namespace

std::string normalize_text(std::string_view text) {
  std::string out;
  normalized_unicode(text).toUTF8String(out);
  return out;
}

MarkerSet make_marker_set(std::string persona_id, const std::vector<std::string>& patterns) {
  if (persona_id.empty()) throw ValidationError("persona_id", "must be nonempty");
  const std::string field = "markers[" + persona_id + "]";
  if (patterns.empty()) throw ValidationError(field, "pattern list is empty");
  MarkerSet set{std::move(persona_id), {}};
  std::set<std::string> seen;
  for (const std::string& raw : patterns) {
    std::string p = normalize_text(raw);
    const std::string body = (!p.empty() && p.back() == '*') ? p.substr(0, p.size() - 1) : p;
    if (body.empty() || body.find('*') != std::string::npos) {
      throw ValidationError(field, "invalid pattern '" + raw + "'");
    }
    if (!seen.insert(p).second) throw ValidationError(field, "duplicate pattern '" + raw + "'");
    set.patterns.push_back(std::move(p));
  }
  return set;
}

std::vector<std::string> match_markers(std::string_view text, const MarkerSet& markers) {
  std::vector<std::string> matched;
  if (text.empty()) return matched;
  const std::u32string haystack = to_u32(normalized_unicode(text));
  for (const std::string& pattern : markers.patterns) {
    const bool wildcard = !pattern.empty() && pattern.back() == '*';
    const std::string body = wildcard ? pattern.substr(0, pattern.size() - 1) : pattern;
    const std::u32string needle = to_u32(icu::UnicodeString::fromUTF8(body));
    if (occurs_with_boundaries(haystack, needle, wildcard)) matched.push_back(pattern);
  }
  return matched;
}

std::vector<MarkerSet> builtin_marker_sets() {
  return {
      make_marker_set("engineer",
                      {"SPOF", "single point of failure", "scalability", "scalable", "reliability",
                       "fault tolerance", "fault-tolerant", "redundancy", "resilience",
                       "throughput", "latency", "consistency", "availability"}),
      make_marker_set("counselor",
                      {"feel heard", "validate", "validated", "acknowledge", "acknowledged",
                       "your experience", "your feelings", "compassion", "compassionate",
                       "without judgment", "trauma-informed", "active listening", "feelings",
                       "emotion"}),
      make_marker_set("founder",
                      {"iterate", "iterating", "iteration", "MVP", "minimum viable",
                       "user feedback", "customer feedback", "capital-efficient", "lean", "runway",
                       "validation", "ship", "shipping", "product-market fit", "vanity metric",
                       "traction", "burn", "bootstrapped"}),
      make_marker_set("teacher",
                      {"imagine", "think of", "like a", "analogy", "analogies", "for example",
                       "step by step", "step-by-step", "students", "understand", "let's say",
                       "picture this", "as if"}),
      make_marker_set("journalist",
                      {"sources", "source", "primary source", "primary sources",
                       "follow the money", "accountability", "transparency", "investigate",
                       "verify", "verified", "on the record", "off the record", "evidence",
                       "public interest", "pointed question", "track record"}),
      make_marker_set("doctor",
                      {"symptom", "symptoms", "diagnosis", "diagnose", "differential", "patient",
                       "treatment", "ruling out", "rule out", "clinical", "examination",
                       "condition", "medication", "evaluate", "underlying", "comorbid"}),
      make_marker_set("lawyer",
                      {"liability", "liabilities", "jurisdiction", "statute", "precedent",
                       "evidence", "evidentiary", "opposing", "counterparty", "due diligence",
                       "parties", "indemnif*", "contractual", "compliance", "compliant",
                       "jurisprudence", "case theory", "on the record"}),
      make_marker_set("chef",
                      {"seasonal", "season", "ingredient", "ingredients", "flavor", "flavour",
                       "palate", "fresh", "simmer", "sauté", "saute", "balance", "garnish",
                       "mise en place", "technique", "classical", "French"}),
  };
}

nlohmann::json marker_sets_to_json(const std::vector<MarkerSet>& sets) {
  nlohmann::json doc = nlohmann::json::object();
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : sets) arr.push_back({{"persona_id", s.persona_id}, {"patterns", s.patterns}});
  doc["marker_sets"] = std::move(arr);
  return doc;
}

std::vector<MarkerSet> marker_sets_from_json(const nlohmann::json& doc) {
  if (!doc.is_object() || !doc.contains("marker_sets") || !doc["marker_sets"].is_array()) {
    throw ValidationError("marker_sets", "missing or not an array");
  }
  std::vector<MarkerSet> sets;
  std::set<std::string> ids;
  for (std::size_t i = 0; i < doc["marker_sets"].size(); ++i) {
    const auto& item = doc["marker_sets"][i];
    const std::string field = "marker_sets[" + std::to_string(i) + "]";
    if (!item.is_object() || !item.contains("persona_id") || !item["persona_id"].is_string() ||
        !item.contains("patterns") || !item["patterns"].is_array()) {
      throw ValidationError(field, "expected {persona_id: string, patterns: [string]}");
    }
    std::vector<std::string> patterns;
    for (const auto& p : item["patterns"]) {
      if (!p.is_string()) throw ValidationError(field + ".patterns", "patterns must be strings");
      patterns.push_back(p.get<std::string>());
    }
    MarkerSet set = make_marker_set(item["persona_id"].get<std::string>(), patterns);
    if (!ids.insert(set.persona_id).second) {
      throw ValidationError(field + ".persona_id", "duplicate persona '" + set.persona_id + "'");
    }
    sets.push_back(std::move(set));
  }
  return sets;
}

std::vector<MarkerSet> load_marker_sets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open marker file " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("marker file " + path.string() + " does not parse: " + e.what());
  }
  return marker_sets_from_json(doc);
}

std::string_view to_string(MarkerCondition condition) {
  switch (condition) {
    case MarkerCondition::clean:
      return "clean";
    case MarkerCondition::additive:
      return "additive";
    case MarkerCondition::remove_x:
      return "remove_x";
    case MarkerCondition::bare:
      return "bare";
  }
  return "?";
}

MarkerCondition parse_marker_condition(std::string_view label) {
  for (MarkerCondition c : kMarkerConditions) {
    if (to_string(c) == label) return c;
  }
  throw ArtifactError("unknown marker condition '" + std::string(label) + "'");
}

MarkerRow score_text(std::string_view text, const MarkerSet& markers, std::string task_id,
                     MarkerCondition condition) {
  MarkerRow row;
  row.persona_id = markers.persona_id;
  row.task_id = std::move(task_id);
  row.condition = condition;
  row.text = std::string(text);
  row.matched = match_markers(text, markers);
  row.distinct_count = static_cast<int>(row.matched.size());
  row.any_marker = row.distinct_count > 0;
  return row;
}

std::vector<MarkerSummary> summarize_markers(const std::vector<MarkerRow>& rows) {
  std::vector<MarkerSummary> out;
  for (MarkerCondition c : kMarkerConditions) {
    MarkerSummary s;
    s.condition = c;
    bool present = false;
    long distinct_total = 0;
    for (const MarkerRow& r : rows) {
      if (r.condition != c) continue;
      present = true;
      if (!r.error.empty()) continue;
      ++s.cells;
      if (r.any_marker) ++s.any_count;
      distinct_total += r.distinct_count;
    }
    if (!present) continue;
    if (s.cells > 0) {
      s.any_rate = static_cast<double>(s.any_count) / s.cells;
      s.mean_distinct = static_cast<double>(distinct_total) / s.cells;
    }
    out.push_back(s);
  }
  return out;
}

MarkerReport run_marker_experiment(ModelHandle& handle, const std::vector<PromptCell>& cells,
                                   const std::vector<MarkerSet>& marker_sets, int layer,
                                   int n_tokens) {
  if (layer < 0 || layer >= handle.info().num_layers) {
    throw InvalidArgument("marker layer " + std::to_string(layer) + " outside model range");
  }
  auto find_set = [&](const std::string& persona_id) -> const MarkerSet& {
    auto it = std::find_if(marker_sets.begin(), marker_sets.end(),
                           [&](const MarkerSet& m) { return m.persona_id == persona_id; });
    if (it == marker_sets.end()) {
      throw ConfigError("no marker set for persona '" + persona_id + "'");
    }
    return *it;
  };
  for (const PromptCell& cell : cells) find_set(cell.persona_id);

  MarkerReport report;
  for (const PromptCell& cell : cells) {
    const MarkerSet& markers = find_set(cell.persona_id);
    try {
      std::array<std::vector<float>, 4> states;
      std::array<std::vector<TokenId>, 4> tokens;
      for (Condition c : kConditions) {
        const auto i = static_cast<std::size_t>(c);
        tokens[i] = handle.tokenize(cell.prompt(c));
        const Site site{layer, static_cast<int>(tokens[i].size()) - 1};
        states[i] = std::move(capture(handle, tokens[i], std::span(&site, 1),
                                      static_cast<PromptTag>(static_cast<int>(c)))
                                  .front()
                                  .values);
      }
      const DecompositionRecord record = decompose(states[0], states[1], states[2], states[3]);
      const auto& xy_tokens = tokens[static_cast<std::size_t>(Condition::XY)];
      const Site site{layer, static_cast<int>(xy_tokens.size()) - 1};
      auto as_write = [&](const std::vector<double>& v) {
        return std::vector<Write>{{site, std::vector<float>(v.begin(), v.end())}};
      };

      auto generate_text = [&](std::span<const TokenId> prompt, std::span<const Write> writes) {
        return handle.detokenize(generate_greedy(handle, prompt, n_tokens, writes));
      };
      const std::vector<TokenId> bare_tokens = handle.tokenize(cell.task_text);
      report.rows.push_back(score_text(generate_text(xy_tokens, {}), markers, cell.task_id,
                                       MarkerCondition::clean));
      report.rows.push_back(score_text(
          generate_text(xy_tokens, as_write(additive_prediction(record))), markers, cell.task_id,
          MarkerCondition::additive));
      report.rows.push_back(score_text(generate_text(xy_tokens, as_write(remove_persona(record))),
                                       markers, cell.task_id, MarkerCondition::remove_x));
      report.rows.push_back(score_text(generate_text(bare_tokens, {}), markers, cell.task_id,
                                       MarkerCondition::bare));
    } catch (const BackendError& e) {
      for (MarkerCondition c : kMarkerConditions) {
        MarkerRow row;
        row.persona_id = cell.persona_id;
        row.task_id = cell.task_id;
        row.condition = c;
        row.error = e.what();
        report.rows.push_back(std::move(row));
      }
    }
  }
  report.summary = summarize_markers(report.rows);
  return report;
}

}  // namespace pcomp
