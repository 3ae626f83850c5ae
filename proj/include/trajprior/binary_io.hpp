#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "trajprior/errors.hpp"
#include "trajprior/tensor.hpp"

namespace trajprior {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

// Raw little-endian stream helpers shared by the checkpoint, clip-set and
// index snapshot formats.
class BinaryWriter {
  public:
    explicit BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
        if (!out_) throw FormatError("cannot open '" + path + "' for writing");
    }

    template <typename T>
    void put(const T& v) {
        static_assert(std::is_trivially_copyable_v<T>);
        out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void put_string(const std::string& s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    template <typename T>
    void put_array(const T* data, std::size_t n) {
        out_.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
    }
    void put_tensor(const Tensor& t) {
        put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) put<std::uint64_t>(d);
        put_array(t.data().data(), t.size());
    }
    void close() {
        out_.close();
        if (!out_) throw FormatError("write to '" + path_ + "' failed");
    }

  private:
    std::string path_;
    std::ofstream out_;
};

class BinaryReader {
  public:
    explicit BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw FormatError("cannot open '" + path + "'");
    }

    template <typename T>
    T get() {
        static_assert(std::is_trivially_copyable_v<T>);
        T v{};
        in_.read(reinterpret_cast<char*>(&v), sizeof(T));
        check();
        return v;
    }
    std::string get_string() {
        const auto n = get<std::uint32_t>();
        if (n > (1u << 24)) throw FormatError(path_ + ": implausible string length");
        std::string s(n, '\0');
        in_.read(s.data(), n);
        check();
        return s;
    }
    template <typename T>
    void get_array(T* data, std::size_t n) {
        in_.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
        check();
    }
    Tensor get_tensor() {
        const auto rank = get<std::uint32_t>();
        if (rank > 8) throw FormatError(path_ + ": implausible tensor rank");
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>());
        if (shape_size(shape) > (std::size_t{1} << 32)) throw FormatError(path_ + ": implausible tensor size");
        Tensor t(shape);
        get_array(t.data().data(), t.size());
        return t;
    }
    void expect_magic(const char (&magic)[5]) {
        char got[4];
        get_array(got, 4);
        if (std::string(got, 4) != std::string(magic, 4)) {
            throw FormatError(path_ + ": bad magic, expected " + std::string(magic, 4));
        }
    }
    bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }
    const std::string& path() const { return path_; }

  private:
    void check() {
        if (!in_) throw FormatError(path_ + ": truncated file");
    }
    std::string path_;
    std::ifstream in_;
};

} // namespace trajprior
