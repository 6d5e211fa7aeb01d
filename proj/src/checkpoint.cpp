#include "clgeo/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

#include "clgeo/csv.hpp"
#include "clgeo/error.hpp"
#include "clgeo/hash.hpp"

namespace clgeo {

namespace {

constexpr char magic[4] = {'C', 'L', 'G', 'K'};
constexpr std::size_t header_size = 36;

template <class T>
void put(std::string& out, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    out.append(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get(const std::string& in, std::size_t offset) {
    if (offset + sizeof(T) > in.size())
        throw Error(ErrorKind::io, "checkpoint truncated at byte " + std::to_string(offset));
    unsigned char b[sizeof(T)];
    std::memcpy(b, in.data() + offset, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ck) {
    std::string out(magic, 4);
    put<std::uint32_t>(out, checkpoint_version);
    put<std::uint64_t>(out, ck.spec_hash);
    put<std::uint32_t>(out, ck.task_index);
    put<std::uint64_t>(out, ck.seed);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(ck.params.size()));
    for (Index i = 0; i < ck.params.size(); ++i) put<double>(out, ck.params[i]);
    return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
    if (bytes.size() < header_size || std::memcmp(bytes.data(), magic, 4) != 0)
        throw Error(ErrorKind::io, "not a checkpoint (bad magic at byte 0)");
    const auto version = get<std::uint32_t>(bytes, 4);
    if (version != checkpoint_version)
        throw Error(ErrorKind::io, "unsupported checkpoint version " + std::to_string(version) + " at byte 4");
    Checkpoint ck;
    ck.spec_hash = get<std::uint64_t>(bytes, 8);
    ck.task_index = get<std::uint32_t>(bytes, 16);
    ck.seed = get<std::uint64_t>(bytes, 20);
    const auto p = get<std::uint64_t>(bytes, 28);
    if (bytes.size() != header_size + p * sizeof(double))
        throw Error(ErrorKind::io, "checkpoint declares " + std::to_string(p) + " parameters but holds " +
                                       std::to_string(bytes.size()) + " bytes");
    ck.params.resize(static_cast<Index>(p));
    for (std::uint64_t i = 0; i < p; ++i)
        ck.params[static_cast<Index>(i)] = get<double>(bytes, header_size + i * sizeof(double));
    return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) { write_file_atomic(path, encode_checkpoint(ck)); }

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

Checkpoint load_checkpoint(const std::string& path, const MlpSpec& spec) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.spec_hash != spec.hash())
        throw Error(ErrorKind::io, path + ": spec hash " + hex64(ck.spec_hash) + " does not match " +
                                       hex64(spec.hash()));
    ParamLayout(spec).check(ck.params);
    return ck;
}

}  // namespace clgeo
