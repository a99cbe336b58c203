#pragma once

#include <cstddef>
#include <istream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "efficientspeech/types.hpp"

namespace es {

inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kUnkId = 1;
inline constexpr std::string_view kPadSymbol = "<pad>";
inline constexpr std::string_view kUnkSymbol = "<unk>";

// Bijection between phoneme symbols and ids 2..; ids 0 and 1 are PAD and UNK.
class SymbolTable {
 public:
  SymbolTable() = default;
  // Sorted, deduplicated, ids assigned from 2 in order.
  explicit SymbolTable(std::vector<std::string> symbols);

  // The 69 stress-marked ARPAbet symbols (15 vowels x 3 stresses + 24 consonants).
  static SymbolTable arpabet();

  std::size_t size() const { return symbols_.size() + 2; }
  std::size_t id(const std::string& symbol) const;  // kUnkId when unknown
  bool contains(const std::string& symbol) const { return ids_.count(symbol) != 0; }
  const std::string& symbol(std::size_t id) const;
  const std::vector<std::string>& symbols() const { return symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::map<std::string, std::size_t> ids_;
};

class Lexicon {
 public:
  Lexicon() = default;

  // CMU dictionary text: `WORD  PH1 PH2 ...`, `;;;` comments, `WORD(2)` variants. Keys are
  // case-insensitive and the first pronunciation of a word wins.
  static Lexicon parse(std::istream& in, const std::string& source = "<stream>");
  static Lexicon load(const std::string& path);

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::string>* find(const std::string& word) const;
  const SymbolTable& symbols() const { return symbols_; }

 private:
  std::map<std::string, std::vector<std::string>> entries_;
  SymbolTable symbols_;
};

// Lowercases, splits on anything that is not a letter, digit or inner apostrophe, and looks up
// each word. Unknown words become one UNK symbol each and are appended to `oov` if given.
std::vector<std::string> text_to_phonemes(std::string_view text, const Lexicon& lexicon,
                                          std::vector<std::string>* oov = nullptr);

// Throws ShapeError on empty input. Unknown symbols map to kUnkId.
PhonemeSequence phonemes_to_ids(const std::vector<std::string>& phonemes, const SymbolTable& table);
std::vector<std::string> ids_to_phonemes(const PhonemeSequence& ids, const SymbolTable& table);

// Space-separated phoneme string, e.g. "DH AH0 K W IH1 K".
std::vector<std::string> split_phonemes(std::string_view text);

}  // namespace es
