#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ragkit/common.hpp"

namespace ragkit {

// Byte-level vocabulary: ids 0-255 are the raw byte values; control tokens
// follow. Template markers ("query: ", "index: ", ...) stay ordinary byte
// sequences so decoded output remains parseable text.
class ByteVocab {
 public:
  static constexpr int kPad = 256;
  static constexpr int kEos = 257;
  static constexpr int kBos = 258;
  static constexpr int kReserved = 4;  // ids 259..262, unassigned

  static constexpr int size() { return 259 + kReserved; }

  static bool is_control(int id) { return id >= 256 && id < size(); }

  // UTF-8 bytes to ids, truncated to max_len. No EOS is appended; encoder
  // inputs carry none and decoder targets add it explicitly.
  static std::vector<int> encode(const std::string& text, size_t max_len) {
    if (max_len < 1) throw std::invalid_argument("encode: max_len must be >= 1");
    std::vector<int> ids;
    ids.reserve(std::min(text.size(), max_len));
    for (unsigned char c : text) {
      if (ids.size() >= max_len) break;
      ids.push_back(static_cast<int>(c));
    }
    return ids;
  }

  static std::vector<int> encode(const std::string& text) {
    return encode(text, std::numeric_limits<size_t>::max());
  }

  // Ids back to a string. Control tokens are dropped; byte sequences that are
  // not valid UTF-8 are replaced with U+FFFD.
  static std::string decode(const std::vector<int>& ids) {
    std::string bytes;
    bytes.reserve(ids.size());
    for (int id : ids) {
      if (id < 0 || id >= size())
        throw std::invalid_argument("decode: unknown token id " + std::to_string(id));
      if (is_control(id)) continue;
      bytes.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return sanitize_utf8(bytes);
  }

  // Id map serialized into checkpoint headers.
  static std::map<std::string, int> control_tokens() {
    return {{"PAD", kPad}, {"EOS", kEos}, {"BOS", kBos}};
  }

  // Replaces invalid UTF-8 sequences with U+FFFD, leaving valid ones intact.
  static std::string sanitize_utf8(const std::string& bytes) {
    static const char* replacement = "\xEF\xBF\xBD";
    std::string out;
    out.reserve(bytes.size());
    size_t i = 0;
    const size_t n = bytes.size();
    while (i < n) {
      const unsigned char c = static_cast<unsigned char>(bytes[i]);
      size_t len;
      uint32_t min_cp;
      if (c < 0x80) {
        out.push_back(bytes[i]);
        ++i;
        continue;
      } else if ((c & 0xE0) == 0xC0) {
        len = 2;
        min_cp = 0x80;
      } else if ((c & 0xF0) == 0xE0) {
        len = 3;
        min_cp = 0x800;
      } else if ((c & 0xF8) == 0xF0) {
        len = 4;
        min_cp = 0x10000;
      } else {
        out += replacement;
        ++i;
        continue;
      }
      if (i + len > n) {
        out += replacement;
        ++i;
        continue;
      }
      uint32_t cp = c & (0xFF >> (len + 1));
      bool ok = true;
      for (size_t j = 1; j < len; ++j) {
        const unsigned char cj = static_cast<unsigned char>(bytes[i + j]);
        if ((cj & 0xC0) != 0x80) {
          ok = false;
          break;
        }
        cp = (cp << 6) | (cj & 0x3F);
      }
      if (!ok || cp < min_cp || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
        out += replacement;
        ++i;
        continue;
      }
      out.append(bytes, i, len);
      i += len;
    }
    return out;
  }
};

}  // namespace ragkit
