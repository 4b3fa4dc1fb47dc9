#include "satstereo/raster.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "satstereo/errors.hpp"
#include "satstereo/hash.hpp"

namespace satstereo {

namespace {

constexpr char kMagic[8] = {'S', 'S', 'F', 'R', '0', '0', '0', '1'};

static_assert(std::endian::native == std::endian::little,
              "raster io assumes a little-endian host");

void put_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t get_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

}  // namespace

void write_float_raster(const std::filesystem::path& path,
                        const std::vector<const FloatRaster*>& channels) {
  if (channels.empty()) throw IoError("write_float_raster: no channels");
  const int w = channels[0]->width();
  const int h = channels[0]->height();
  for (const auto* c : channels)
    if (c->width() != w || c->height() != h)
      throw IoError("write_float_raster: channel size mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put_u32(os, static_cast<uint32_t>(w));
  put_u32(os, static_cast<uint32_t>(h));
  put_u32(os, static_cast<uint32_t>(channels.size()));
  for (const auto* c : channels)
    os.write(reinterpret_cast<const char*>(c->data()),
             static_cast<std::streamsize>(c->size() * sizeof(float)));
  if (!os) throw IoError("short write: " + path.string());
}

void write_float_raster(const std::filesystem::path& path, const FloatRaster& r) {
  write_float_raster(path, {&r});
}

std::vector<FloatRaster> read_float_raster(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("bad raster magic: " + path.string());
  const uint32_t w = get_u32(is);
  const uint32_t h = get_u32(is);
  const uint32_t nc = get_u32(is);
  if (!is || nc == 0 || w == 0 || h == 0 || nc > 64)
    throw IoError("bad raster header: " + path.string());
  std::vector<FloatRaster> out;
  out.reserve(nc);
  for (uint32_t c = 0; c < nc; ++c) {
    FloatRaster r(static_cast<int>(w), static_cast<int>(h));
    is.read(reinterpret_cast<char*>(r.data()),
            static_cast<std::streamsize>(r.size() * sizeof(float)));
    if (!is) throw IoError("short read: " + path.string());
    out.push_back(std::move(r));
  }
  return out;
}

FloatRaster read_float_raster_single(const std::filesystem::path& path) {
  auto v = read_float_raster(path);
  if (v.size() != 1)
    throw IoError("expected single-channel raster: " + path.string());
  return std::move(v[0]);
}

void write_grid_header(const std::filesystem::path& path, const GridSpec& g) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path.string());
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "grid\nlat0 = %.17g\nlon0 = %.17g\ndlat = %.17g\ndlon = %.17g\n"
                "cell_m = %.17g\nwidth = %d\nheight = %d\n",
                g.lat0, g.lon0, g.dlat, g.dlon, g.cell_m, g.width, g.height);
  os << buf;
}

GridSpec read_grid_header(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::string tag;
  std::getline(is, tag);
  if (tag != "grid") throw IoError("bad grid header: " + path.string());
  GridSpec g;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string key, eq;
    ls >> key >> eq;
    if (eq != "=") continue;
    if (key == "lat0") ls >> g.lat0;
    else if (key == "lon0") ls >> g.lon0;
    else if (key == "dlat") ls >> g.dlat;
    else if (key == "dlon") ls >> g.dlon;
    else if (key == "cell_m") ls >> g.cell_m;
    else if (key == "width") ls >> g.width;
    else if (key == "height") ls >> g.height;
  }
  if (g.width <= 0 || g.height <= 0 || g.dlat <= 0 || g.dlon <= 0)
    throw IoError("incomplete grid header: " + path.string());
  return g;
}

void write_height_grid(const std::filesystem::path& raster_path, const HeightGrid& hg) {
  if (hg.heights.width() != hg.grid.width || hg.heights.height() != hg.grid.height)
    throw IoError("height grid raster does not match its grid spec");
  write_float_raster(raster_path, hg.heights);
  auto hdr = raster_path;
  hdr.replace_extension(".hdr");
  write_grid_header(hdr, hg.grid);
}

HeightGrid read_height_grid(const std::filesystem::path& raster_path) {
  HeightGrid hg;
  hg.heights = read_float_raster_single(raster_path);
  auto hdr = raster_path;
  hdr.replace_extension(".hdr");
  hg.grid = read_grid_header(hdr);
  if (hg.heights.width() != hg.grid.width || hg.heights.height() != hg.grid.height)
    throw IoError("grid header disagrees with raster: " + raster_path.string());
  return hg;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

std::string hash_file_hex(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for hash: " + path.string());
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (is) {
    is.read(buf, sizeof(buf));
    h = fnv1a64(std::string_view(buf, static_cast<size_t>(is.gcount())), h);
  }
  return hex64(h);
}

}  // namespace satstereo
