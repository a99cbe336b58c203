#include "efficientspeech/frontend.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

namespace es {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

bool valid_symbol(const std::string& s) {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return std::isupper(static_cast<unsigned char>(c)) || std::isdigit(static_cast<unsigned char>(c));
  });
}

}  // namespace

SymbolTable::SymbolTable(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
  std::sort(symbols_.begin(), symbols_.end());
  symbols_.erase(std::unique(symbols_.begin(), symbols_.end()), symbols_.end());
  for (std::size_t i = 0; i < symbols_.size(); ++i) ids_[symbols_[i]] = i + 2;
}

SymbolTable SymbolTable::arpabet() {
  static const char* vowels[] = {"AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER",
                                 "EY", "IH", "IY", "OW", "OY", "UH", "UW"};
  static const char* consonants[] = {"B", "CH", "D", "DH", "F", "G", "HH", "JH", "K", "L", "M", "N",
                                     "NG", "P", "R", "S", "SH", "T", "TH", "V", "W", "Y", "Z", "ZH"};
  std::vector<std::string> s;
  for (const char* v : vowels) {
    for (char stress : {'0', '1', '2'}) s.push_back(std::string(v) + stress);
  }
  for (const char* c : consonants) s.emplace_back(c);
  return SymbolTable(std::move(s));
}

std::size_t SymbolTable::id(const std::string& symbol) const {
  auto it = ids_.find(symbol);
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& SymbolTable::symbol(std::size_t id) const {
  static const std::string pad(kPadSymbol), unk(kUnkSymbol);
  if (id == kPadId) return pad;
  if (id == kUnkId) return unk;
  if (id - 2 >= symbols_.size()) throw TokenError(0, static_cast<long long>(id), size());
  return symbols_[id - 2];
}

Lexicon Lexicon::parse(std::istream& in, const std::string& source) {
  Lexicon lex;
  std::set<std::string> seen;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind(";;;", 0) == 0) continue;
    std::istringstream ss(line);
    std::string word;
    if (!(ss >> word)) continue;
    auto bad = [&](const std::string& why) {
      return DataError(source + ":" + std::to_string(lineno) + ": " + why);
    };
    if (auto paren = word.find('('); paren != std::string::npos && word.back() == ')' && paren > 0) {
      word.erase(paren);
    }
    std::vector<std::string> phones;
    for (std::string p; ss >> p;) {
      if (!valid_symbol(p)) throw bad("malformed phoneme '" + p + "'");
      phones.push_back(p);
    }
    if (phones.empty()) throw bad("word '" + word + "' has no pronunciation");
    seen.insert(phones.begin(), phones.end());
    lex.entries_.emplace(lower(word), std::move(phones));
  }
  if (in.bad()) throw DataError("cannot read lexicon " + source);
  lex.symbols_ = SymbolTable(std::vector<std::string>(seen.begin(), seen.end()));
  return lex;
}

Lexicon Lexicon::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open lexicon " + path);
  return parse(in, path);
}

const std::vector<std::string>* Lexicon::find(const std::string& word) const {
  auto it = entries_.find(lower(word));
  return it == entries_.end() ? nullptr : &it->second;
}

std::vector<std::string> text_to_phonemes(std::string_view text, const Lexicon& lexicon,
                                          std::vector<std::string>* oov) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!word_char(text[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && (word_char(text[j]) || (text[j] == '\'' && j + 1 < text.size() && word_char(text[j + 1])))) ++j;
    const std::string word = lower(text.substr(i, j - i));
    if (const auto* phones = lexicon.find(word)) {
      out.insert(out.end(), phones->begin(), phones->end());
    } else {
      out.emplace_back(kUnkSymbol);
      if (oov) oov->push_back(word);
    }
    i = j;
  }
  return out;
}

PhonemeSequence phonemes_to_ids(const std::vector<std::string>& phonemes, const SymbolTable& table) {
  if (phonemes.empty()) throw ShapeError("cannot build a phoneme sequence from zero phonemes");
  std::vector<std::size_t> ids;
  ids.reserve(phonemes.size());
  for (const auto& p : phonemes) ids.push_back(table.id(p));
  return PhonemeSequence(std::move(ids));
}

std::vector<std::string> ids_to_phonemes(const PhonemeSequence& ids, const SymbolTable& table) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids.ids[i] >= table.size()) throw TokenError(i, static_cast<long long>(ids.ids[i]), table.size());
    out.push_back(table.symbol(ids.ids[i]));
  }
  return out;
}

std::vector<std::string> split_phonemes(std::string_view text) {
  std::istringstream ss{std::string(text)};
  std::vector<std::string> out;
  for (std::string p; ss >> p;) out.push_back(p);
  return out;
}

}  // namespace es
