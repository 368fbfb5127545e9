#include "comln/tasks.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

namespace comln {

namespace {

static_assert(std::endian::native == std::endian::little, "episode files assume a little-endian host");

void require(bool ok, const char* what) {
    if (!ok)
        throw DimensionError(what);
}

void check_split(const EmbeddedSet& set, std::size_t ways, std::size_t per_class) {
    set.validate();
    require(set.ways() == ways, "label width differs from the number of classes");
    require(set.size() == ways * per_class, "row count must equal shots * ways");
    std::vector<std::size_t> hist(ways, 0);
    for (std::size_t m = 0; m < set.size(); ++m)
        ++hist[static_cast<std::size_t>(set.class_of(m))];
    for (auto h : hist)
        require(h == per_class, "classes are not balanced");
}

} // namespace

void Episode::validate() const {
    require(ways >= 2, "need at least two classes");
    require(shots >= 1 && test_shots >= 1, "shots must be positive");
    check_split(train, ways, shots);
    check_split(test, ways, test_shots);
    require(train.dim() == test.dim(), "train and test feature sizes differ");
}

bool Episode::operator==(const Episode& o) const {
    return ways == o.ways && shots == o.shots && test_shots == o.test_shots &&
           train.features == o.train.features && train.labels == o.train.labels &&
           test.features == o.test.features && test.labels == o.test.labels;
}

void TaskGenConfig::validate() const {
    if (ways < 2 || shots < 1 || test_shots < 1 || input_dim < 1)
        throw std::invalid_argument("task config: ways >= 2 and positive shots / input_dim required");
    if (!(class_spread > 0) || !(noise_std >= 0))
        throw std::invalid_argument("task config: class_spread > 0 and noise_std >= 0 required");
}

Episode sample_episode(const TaskGenConfig& cfg, std::uint64_t index) {
    cfg.validate();
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const auto N = static_cast<Eigen::Index>(cfg.ways);
    const auto d = static_cast<Eigen::Index>(cfg.input_dim);
    Matrix protos(N, d);
    for (Eigen::Index n = 0; n < N; ++n)
        for (Eigen::Index k = 0; k < d; ++k)
            protos(n, k) = cfg.class_spread * gauss(rng);

    auto draw = [&](std::size_t per_class) {
        const std::size_t M = per_class * cfg.ways;
        Matrix X(static_cast<Eigen::Index>(M), d);
        std::vector<int> classes(M);
        for (std::size_t m = 0; m < M; ++m) {
            const auto c = static_cast<Eigen::Index>(m % cfg.ways);
            classes[m] = static_cast<int>(c);
            for (Eigen::Index k = 0; k < d; ++k)
                X(static_cast<Eigen::Index>(m), k) = protos(c, k) + cfg.noise_std * gauss(rng);
        }
        return EmbeddedSet::from_indices(std::move(X), classes, cfg.ways);
    };

    Episode ep;
    ep.ways = cfg.ways;
    ep.shots = cfg.shots;
    ep.test_shots = cfg.test_shots;
    ep.train = draw(cfg.shots);
    ep.test = draw(cfg.test_shots);
    return ep;
}

EpisodeFileError::EpisodeFileError(Kind kind, std::size_t offset, const std::string& what)
    : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), kind_(kind),
      offset_(offset) {}

namespace {

constexpr const char* kMagic = "COMLN-EP";

void put_features(std::string& out, const Matrix& X) {
    for (Eigen::Index r = 0; r < X.rows(); ++r)
        for (Eigen::Index c = 0; c < X.cols(); ++c) {
            const double v = X(r, c);
            char buf[8];
            std::memcpy(buf, &v, 8);
            out.append(buf, 8);
        }
}

void put_labels(std::string& out, const EmbeddedSet& set) {
    for (std::size_t m = 0; m < set.size(); ++m) {
        const auto v = static_cast<std::uint16_t>(set.class_of(m));
        char buf[2];
        std::memcpy(buf, &v, 2);
        out.append(buf, 2);
    }
}

struct Reader {
    const std::string& bytes;
    std::size_t pos;

    const char* take(std::size_t n, const char* what) {
        if (bytes.size() - pos < n)
            throw EpisodeFileError(EpisodeFileError::Kind::truncated_file, pos,
                                   std::string("file ends inside ") + what);
        const char* p = bytes.data() + pos;
        pos += n;
        return p;
    }

    Matrix features(std::size_t rows, std::size_t cols) {
        Matrix X(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        const char* p = take(rows * cols * 8, "feature block");
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                double v;
                std::memcpy(&v, p + (r * cols + c) * 8, 8);
                X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v;
            }
        return X;
    }

    EmbeddedSet split(std::size_t rows, std::size_t cols, std::size_t ways, std::size_t per_class) {
        Matrix X = features(rows, cols);
        const std::size_t label_start = pos;
        const char* p = take(rows * 2, "label block");
        std::vector<int> classes(rows);
        std::vector<std::size_t> hist(ways, 0);
        for (std::size_t m = 0; m < rows; ++m) {
            std::uint16_t v;
            std::memcpy(&v, p + m * 2, 2);
            if (v >= ways)
                throw EpisodeFileError(EpisodeFileError::Kind::dimension_inconsistency, label_start + m * 2,
                                       "label " + std::to_string(v) + " out of range for N = " +
                                           std::to_string(ways));
            classes[m] = v;
            ++hist[v];
        }
        for (auto h : hist)
            if (h != per_class)
                throw EpisodeFileError(EpisodeFileError::Kind::dimension_inconsistency, label_start,
                                       "label block is not balanced");
        return EmbeddedSet::from_indices(std::move(X), classes, ways);
    }
};

} // namespace

void write_episodes(const std::string& path, const std::vector<Episode>& episodes) {
    std::size_t N = 0, k = 0, kt = 0, d = 0;
    if (!episodes.empty()) {
        const Episode& e = episodes.front();
        N = e.ways;
        k = e.shots;
        kt = e.test_shots;
        d = e.train.dim();
    }
    std::string payload;
    for (std::size_t i = 0; i < episodes.size(); ++i) {
        const Episode& e = episodes[i];
        if (e.ways != N || e.shots != k || e.test_shots != kt || e.train.dim() != d ||
            e.train.size() != k * N || e.test.size() != kt * N || e.test.dim() != d ||
            e.train.ways() != N || e.test.ways() != N)
            throw EpisodeFileError(EpisodeFileError::Kind::dimension_inconsistency, 0,
                                   "episode " + std::to_string(i) + " does not match the file dimensions");
        put_features(payload, e.train.features);
        put_labels(payload, e.train);
        put_features(payload, e.test.features);
        put_labels(payload, e.test);
    }
    std::ostringstream header;
    header << kMagic << " 1 " << episodes.size() << ' ' << N << ' ' << k << ' ' << kt << ' ' << d << '\n';

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw EpisodeFileError(EpisodeFileError::Kind::io, 0, "cannot open '" + path + "' for writing");
    out << header.str();
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out)
        throw EpisodeFileError(EpisodeFileError::Kind::io, 0, "write to '" + path + "' failed");
}

std::vector<Episode> load_episodes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw EpisodeFileError(EpisodeFileError::Kind::io, 0, "cannot open '" + path + "'");
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    const auto nl = bytes.find('\n');
    if (nl == std::string::npos || nl > 256)
        throw EpisodeFileError(EpisodeFileError::Kind::malformed_header, 0, "missing header line");
    std::istringstream hs(bytes.substr(0, nl));
    std::string magic, extra;
    long long version = -1, count = -1, N = -1, k = -1, kt = -1, d = -1;
    hs >> magic >> version >> count >> N >> k >> kt >> d;
    if (!hs || magic != kMagic || (hs >> extra))
        throw EpisodeFileError(EpisodeFileError::Kind::malformed_header, 0,
                               "header must read 'COMLN-EP 1 <count> <N> <k> <k_test> <d>'");
    if (version != 1)
        throw EpisodeFileError(EpisodeFileError::Kind::malformed_header, 0,
                               "unsupported version " + std::to_string(version));
    if (count < 0 || N < 0 || k < 0 || kt < 0 || d < 0)
        throw EpisodeFileError(EpisodeFileError::Kind::malformed_header, 0, "negative field in header");
    if (count > 0 && (N < 2 || k < 1 || kt < 1 || d < 1 || N > 65535))
        throw EpisodeFileError(EpisodeFileError::Kind::dimension_inconsistency, 0,
                               "header dimensions cannot describe an episode");

    Reader r{bytes, nl + 1};
    std::vector<Episode> out;
    const auto uN = static_cast<std::size_t>(N), uk = static_cast<std::size_t>(k),
               ukt = static_cast<std::size_t>(kt), ud = static_cast<std::size_t>(d);
    for (long long i = 0; i < count; ++i) {
        Episode e;
        e.ways = uN;
        e.shots = uk;
        e.test_shots = ukt;
        e.train = r.split(uk * uN, ud, uN, uk);
        e.test = r.split(ukt * uN, ud, uN, ukt);
        out.push_back(std::move(e));
    }
    if (r.pos != bytes.size())
        throw EpisodeFileError(EpisodeFileError::Kind::dimension_inconsistency, r.pos,
                               "trailing bytes after the declared episodes");
    return out;
}

} // namespace comln
