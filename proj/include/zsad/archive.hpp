/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

// Tensor archive container shared by backbone weight files and prompt
// checkpoints:
//
//   "ZSADARC1" | u64 header_len | header JSON | payload | u64 FNV-1a
//
// The header holds free-form metadata plus a tensor table
// (name, rows, cols, dtype, offset into the payload). The trailing digest
// covers every preceding byte. Integers are little-endian.

#include "zsad/core.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace zsad {

using Json = nlohmann::ordered_json;

enum class DType { f32, f64 };

class TensorArchive {
public:
    Json meta = Json::object();

    void put(std::string name, Matrix value, DType dtype = DType::f64)
    {
        for (auto& t : tensors_) {
            if (t.name == name) {
                t.value = std::move(value);
                t.dtype = dtype;
                return;
            }
        }
        tensors_.push_back({std::move(name), std::move(value), dtype});
    }

    bool has(std::string_view name) const
    {
        for (const auto& t : tensors_) {
            if (t.name == name) {
                return true;
            }
        }
        return false;
    }

    const Matrix& get(std::string_view name) const
    {
        for (const auto& t : tensors_) {
            if (t.name == name) {
                return t.value;
            }
        }
        throw DataError(detail::concat("archive has no tensor '", name, "'"));
    }

    /// Tensor by name, or an empty matrix when absent.
    Matrix get_or_empty(std::string_view name) const { return has(name) ? get(name) : Matrix(); }

    std::size_t size() const { return tensors_.size(); }

    void save(const std::filesystem::path& path) const;
    static TensorArchive load(const std::filesystem::path& path);

private:
    struct Entry {
        std::string name;
        Matrix value;
        DType dtype;
    };
    std::vector<Entry> tensors_;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

inline constexpr char kArchiveMagic[8] = {'Z', 'S', 'A', 'D', 'A', 'R', 'C', '1'};

inline void append_bytes(std::string& buf, const void* p, std::size_t n)
{
    buf.append(static_cast<const char*>(p), n);
}

}  // namespace detail

inline void TensorArchive::save(const std::filesystem::path& path) const
{
    Json table = Json::array();
    std::string payload;
    for (const auto& t : tensors_) {
        table.push_back({{"name", t.name},
                         {"rows", t.value.rows()},
                         {"cols", t.value.cols()},
                         {"dtype", t.dtype == DType::f32 ? "f32" : "f64"},
                         {"offset", payload.size()}});
        if (t.dtype == DType::f64) {
            detail::append_bytes(payload, t.value.data(), sizeof(double) * static_cast<std::size_t>(t.value.size()));
        } else {
            for (Eigen::Index i = 0; i < t.value.size(); ++i) {
                const float f = static_cast<float>(t.value.data()[i]);
                detail::append_bytes(payload, &f, sizeof(f));
            }
        }
    }
    Json header = {{"meta", meta}, {"tensors", table}};
    const std::string header_text = header.dump();
    const std::uint64_t header_len = header_text.size();

    std::string out;
    detail::append_bytes(out, detail::kArchiveMagic, sizeof(detail::kArchiveMagic));
    detail::append_bytes(out, &header_len, sizeof(header_len));
    out += header_text;
    out += payload;
    Fnv1a h;
    h.update(out.data(), out.size());
    const std::uint64_t digest = h.digest();
    detail::append_bytes(out, &digest, sizeof(digest));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw DataError("cannot open archive for writing: " + path.string());
    }
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) {
        throw DataError("failed writing archive: " + path.string());
    }
}

inline TensorArchive TensorArchive::load(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw DataError("cannot open archive: " + path.string());
    }
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const std::size_t fixed = sizeof(detail::kArchiveMagic) + 2 * sizeof(std::uint64_t);
    if (bytes.size() < fixed || std::memcmp(bytes.data(), detail::kArchiveMagic, sizeof(detail::kArchiveMagic)) != 0) {
        throw IntegrityError("not a zsad archive or truncated header: " + path.string());
    }
    std::uint64_t stored = 0;
    std::memcpy(&stored, bytes.data() + bytes.size() - sizeof(stored), sizeof(stored));
    Fnv1a h;
    h.update(bytes.data(), bytes.size() - sizeof(stored));
    if (h.digest() != stored) {
        throw IntegrityError("archive checksum mismatch (truncated or corrupted): " + path.string());
    }
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data() + sizeof(detail::kArchiveMagic), sizeof(header_len));
    const std::size_t header_start = sizeof(detail::kArchiveMagic) + sizeof(header_len);
    if (header_start + header_len + sizeof(stored) > bytes.size()) {
        throw IntegrityError("archive header length out of range: " + path.string());
    }
    Json header;
    try {
        header = Json::parse(bytes.substr(header_start, header_len));
    } catch (const Json::exception& e) {
        throw IntegrityError(std::string("archive header is not valid JSON: ") + e.what());
    }
    const std::size_t payload_start = header_start + header_len;
    const std::size_t payload_len = bytes.size() - sizeof(stored) - payload_start;

    TensorArchive a;
    a.meta = header.value("meta", Json::object());
    for (const auto& t : header.at("tensors")) {
        const auto rows = t.at("rows").get<Eigen::Index>();
        const auto cols = t.at("cols").get<Eigen::Index>();
        const auto offset = t.at("offset").get<std::size_t>();
        const bool f32 = t.at("dtype").get<std::string>() == "f32";
        const std::size_t width = f32 ? sizeof(float) : sizeof(double);
        const std::size_t n = static_cast<std::size_t>(rows * cols);
        if (offset + n * width > payload_len) {
            throw IntegrityError("tensor '" + t.at("name").get<std::string>() + "' exceeds payload");
        }
        Matrix m(rows, cols);
        const char* src = bytes.data() + payload_start + offset;
        if (f32) {
            for (std::size_t i = 0; i < n; ++i) {
                float v = 0.0f;
                std::memcpy(&v, src + i * sizeof(float), sizeof(float));
                m.data()[i] = v;
            }
        } else {
            std::memcpy(m.data(), src, n * sizeof(double));
        }
        a.put(t.at("name").get<std::string>(), std::move(m), f32 ? DType::f32 : DType::f64);
    }
    return a;
}

}  // namespace zsad
